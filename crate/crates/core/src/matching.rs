//! Minimum-cost bipartite assignment between queries (rows) and entities (columns).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, entity)` pairs, sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Entity assigned to each query, if any.
    pub fn entity_of(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for &(q, e) in &self.pairs {
            out[q] = Some(e);
        }
        out
    }
}

/// Optimal assignment of `min(M, E)` pairs for a row-major `M x E` cost
/// matrix, by shortest augmenting paths with dual potentials.
///
/// Ties are broken deterministically: among equal-length augmenting paths the
/// lowest column index wins, and rows are inserted in index order.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::Dimension {
            op: "hungarian",
            lhs: vec![rows, cols],
            rhs: vec![cost.len()],
        });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!(
            "assignment cost at ({}, {})",
            i / cols.max(1),
            i % cols.max(1)
        )));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: vec![],
            unmatched: (0..rows).collect(),
            cost: 0.0,
        });
    }
    // Solve with the smaller side as rows.
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };

    // 1-based potentials; p[j] = row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(q, e)| cost[q * cols + e]).sum();
    let mut matched = vec![false; rows];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched: (0..rows).filter(|&q| !matched[q]).collect(),
        cost: total,
    })
}
