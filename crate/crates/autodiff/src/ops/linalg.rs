use crate::gemm::gemm;
use crate::graph::{GradSink, Op};
use crate::tensor::strides;
use crate::{Graph, Real, Tensor, TensorError, Var};

/// Batch layout of a matmul: the broadcast batch shape and, per output batch
/// entry, the batch offsets into `a` and `b`.
struct BatchPlan {
    out_batch: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<(BatchPlan, usize, usize, usize), TensorError> {
    let err = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
    let (p2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if p != p2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut out_batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out_batch.push(x);
        } else if x == 1 {
            out_batch.push(y);
        } else {
            return Err(err());
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let count: usize = out_batch.iter().product();
    let mut pairs = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        pairs.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((BatchPlan { out_batch, pairs }, m, p, r))
}

impl Graph {
    /// Contraction of `[..., M, P]` with `[..., P, R]`; leading batch axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (plan, m, p, r) = plan(self.shape(a), self.shape(b))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; plan.pairs.len() * m * r];
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            gemm(
                m,
                p,
                r,
                &ad[oa * m * p..(oa + 1) * m * p],
                false,
                &bd[ob * p * r..(ob + 1) * p * r],
                false,
                &mut data[i * m * r..(i + 1) * m * r],
                false,
            );
        }
        let mut shape = plan.out_batch;
        shape.extend_from_slice(&[m, r]);
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b }, rg))
    }

    /// Applies each query embedding as a 1x1 filter over the per-pixel feature
    /// vectors: `[.., N, K] x [.., K, H, W] -> [.., N, H, W]`.
    pub fn apply_mask_filters(&mut self, embeddings: Var, features: Var) -> Result<Var, TensorError> {
        let fs = self.shape(features).to_vec();
        let es = self.shape(embeddings).to_vec();
        if fs.len() < 3 || es.len() < 2 || es[es.len() - 1] != fs[fs.len() - 3] {
            return Err(TensorError::Shape {
                op: "apply_mask_filters",
                lhs: es,
                rhs: fs,
            });
        }
        let (h, w) = (fs[fs.len() - 2], fs[fs.len() - 1]);
        let mut flat = fs[..fs.len() - 2].to_vec();
        flat.push(h * w);
        let f2 = self.reshape(features, &flat)?;
        let logits = self.matmul(embeddings, f2)?;
        let mut out = self.shape(logits).to_vec();
        out.pop();
        out.extend_from_slice(&[h, w]);
        self.reshape(logits, &out)
    }
}

pub(crate) fn matmul_backward(a: Var, b: Var, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let (plan, m, p, r) = plan(av.shape(), bv.shape()).expect("validated in forward");
    debug_assert_eq!(out.numel(), plan.pairs.len() * m * r);
    let ad = av.data();
    let bd = bv.data();
    if let Some(ga) = sink.buf(a) {
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            // dA = dC * B^T
            gemm(
                m,
                r,
                p,
                &g[i * m * r..(i + 1) * m * r],
                false,
                &bd[ob * p * r..(ob + 1) * p * r],
                true,
                &mut ga[oa * m * p..(oa + 1) * m * p],
                true,
            );
        }
    }
    if let Some(gb) = sink.buf(b) {
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            // dB = A^T * dC
            gemm(
                p,
                m,
                r,
                &ad[oa * m * p..(oa + 1) * m * p],
                true,
                &g[i * m * r..(i + 1) * m * r],
                false,
                &mut gb[ob * p * r..(ob + 1) * p * r],
                true,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn batch_broadcast_against_matrix() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 4], |i| i as Real));
        let b = g.constant(Tensor::from_fn(&[4, 5], |i| (i % 7) as Real));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 5]);
        let av = g.value(a).clone();
        let bv = g.value(b).clone();
        let cv = g.value(c);
        for n in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: Real = (0..4).map(|k| av.at(&[n, i, k]) * bv.at(&[k, j])).sum();
                    assert_eq!(cv.at(&[n, i, j]), want);
                }
            }
        }
    }

    #[test]
    fn mismatched_inner_extent_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn mask_filters_select_channels() {
        let mut g = Graph::new();
        let feats = g.constant(Tensor::from_fn(&[3, 2, 2], |i| i as Real));
        let e = g.constant(t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        let m = g.apply_mask_filters(e, feats).unwrap();
        assert_eq!(g.shape(m), &[2, 2, 2]);
        assert_eq!(&g.value(m).data()[..4], &[4.0, 5.0, 6.0, 7.0]);
        assert!(g.value(m).data()[4..].iter().all(|&x| x == 0.0));
        let bad = g.constant(Tensor::zeros(&[2, 4]));
        assert!(g.apply_mask_filters(bad, feats).is_err());
    }
}
