//! Set-prediction losses: per-view matching at the image level, one matching
//! shared across views at the batch level.

use cropformer_autodiff::{bce_with_logits, sigmoid};
use cropformer_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ViewGt;
use crate::mask::Mask;
use crate::matching::{hungarian, Assignment};

/// Smoothing added to the numerator and denominator of the dice ratio.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            ce: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossWeights {
    pub image: TermWeights,
    pub batch: TermWeights,
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        let t = TermWeights { ce: w, bce: w, dice: w };
        Self { image: t, batch: t }
    }
}

/// Matching cost pieces for one view: `mask[n][e]` is the weighted mask
/// BCE plus dice; the entityness part is kept apart so it can be counted
/// once when several views are summed.
struct ViewCost {
    mask: Vec<Vec<f64>>,
}

/// `w_ce (1 - sigmoid(u_n))` per query.
fn entity_cost(entity_logits: &[Real], w: &TermWeights) -> Vec<f64> {
    entity_logits.iter().map(|&u| w.ce * (1.0 - sigmoid(u) as f64)).collect()
}

fn view_cost(mask_logits: &[Real], pixels: usize, gts: &[&Mask], w: &TermWeights) -> ViewCost {
    let n = mask_logits.len() / pixels;
    let mask = (0..n)
        .map(|q| {
            let x = &mask_logits[q * pixels..(q + 1) * pixels];
            let prob: Vec<f64> = x.iter().map(|&v| sigmoid(v) as f64).collect();
            // BCE(x, t) = softplus(x) - x t, so only the positive pixels depend on the target
            let softplus: f64 = x.iter().map(|&v| bce_with_logits(v, 0.0) as f64).sum();
            let psum: f64 = prob.iter().sum();
            gts.iter()
                .map(|m| {
                    let (mut xt, mut pt) = (0.0, 0.0);
                    for i in m.ones() {
                        xt += x[i] as f64;
                        pt += prob[i];
                    }
                    let bce = (softplus - xt) / pixels as f64;
                    let dice = 1.0 - (2.0 * pt + DICE_EPS) / (psum + m.area() as f64 + DICE_EPS);
                    w.bce * bce + w.dice * dice
                })
                .collect()
        })
        .collect();
    ViewCost { mask }
}

/// Cost matrix `N x E` (row-major) between queries and ground-truth masks:
/// `w_ce (1 - sigmoid(u_n)) + w_bce BCE + w_dice Dice`, dense over pixels.
pub fn match_cost(entity_logits: &[Real], mask_logits: &[Real], gts: &[&Mask], w: &TermWeights) -> Result<Vec<f64>> {
    let n = entity_logits.len();
    let pixels = gts.first().map(|m| m.len()).unwrap_or(0);
    if n == 0 || gts.is_empty() {
        return Ok(vec![]);
    }
    if mask_logits.len() != n * pixels || gts.iter().any(|m| m.len() != pixels) {
        return Err(Error::Dimension {
            op: "match_cost",
            lhs: vec![n, mask_logits.len() / n.max(1)],
            rhs: vec![gts.len(), pixels],
        });
    }
    let ce = entity_cost(entity_logits, w);
    Ok(combine(&ce, &view_cost(mask_logits, pixels, gts, w).mask))
}

/// Row-major `ce[q] + mask[q][e]`.
fn combine(ce: &[f64], mask: &[Vec<f64>]) -> Vec<f64> {
    ce.iter()
        .zip(mask)
        .flat_map(|(&c, row)| row.iter().map(move |&m| c + m))
        .collect()
}

/// Differentiable loss terms of one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelTerms {
    pub ce: Var,
    pub bce: Var,
    pub dice: Var,
}

/// Supervised mask row: logit row index and its target.
struct MaskRow<'a> {
    row: usize,
    target: &'a Mask,
}

fn assemble(
    g: &mut Graph,
    entity: Var,
    entity_targets: Vec<Real>,
    masks: Var,
    rows: &[MaskRow<'_>],
) -> Result<LevelTerms> {
    let shape = g.shape(masks).to_vec();
    let pixels: usize = shape[2..].iter().product();
    let total_rows = shape[0] * shape[1];
    let targets = Tensor::new(g.shape(entity).to_vec(), entity_targets)?;
    let ce = g.sigmoid_bce(entity, targets)?;
    let ce = g.mean_all(ce);
    let counted = rows.len();
    if counted == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(LevelTerms { ce, bce: zero, dice: zero });
    }
    let flat = g.reshape(masks, &[total_rows, pixels])?;
    let idx: Vec<usize> = rows.iter().map(|r| r.row).collect();
    let picked = g.index_select(flat, &idx)?;
    let mut t = vec![0.0 as Real; rows.len() * pixels];
    for (k, r) in rows.iter().enumerate() {
        for i in r.target.ones() {
            t[k * pixels + i] = 1.0;
        }
    }
    let t = Tensor::new(vec![rows.len(), pixels], t)?;
    let bce = g.sigmoid_bce(picked, t.clone())?;
    let bce = g.sum_all(bce);
    let bce = g.scale(bce, 1.0 / counted as Real);
    let dice = g.dice_loss(picked, t, DICE_EPS as Real)?;
    let dice = g.sum_all(dice);
    let dice = g.scale(dice, 1.0 / counted as Real);
    Ok(LevelTerms { ce, bce, dice })
}

fn check_gt(gts: &[Vec<ViewGt>], batch: usize, views: usize, pixels: usize) -> Result<()> {
    if gts.len() != batch || gts.iter().any(|s| s.len() != views) {
        return Err(Error::Dimension {
            op: "loss ground truth",
            lhs: vec![batch, views],
            rhs: vec![gts.len(), gts.first().map_or(0, Vec::len)],
        });
    }
    for v in gts.iter().flatten() {
        if let Some(m) = v.masks.iter().find(|m| m.len() != pixels) {
            return Err(Error::Dimension {
                op: "loss ground truth",
                lhs: vec![pixels],
                rhs: vec![m.len()],
            });
        }
    }
    Ok(())
}

/// Image-level terms. `entity` is `[B*T, N]`, `masks` `[B*T, N, h, w]`,
/// `gts[b][t]` the targets of view `t` of scene `b`. Each view is matched
/// independently over the entities present in it.
pub fn image_level_loss(
    g: &mut Graph,
    entity: Var,
    masks: Var,
    gts: &[Vec<ViewGt>],
    w: &TermWeights,
) -> Result<(LevelTerms, Vec<Assignment>)> {
    let shape = g.shape(masks).to_vec();
    let (rows_bt, n, pixels) = (shape[0], shape[1], shape[2] * shape[3]);
    let batch = gts.len();
    let views = rows_bt / batch.max(1);
    check_gt(gts, batch, views, pixels)?;
    let ent = g.value(entity).data().to_vec();
    let logits = g.value(masks).data().to_vec();
    let mut targets = vec![0.0 as Real; rows_bt * n];
    let mut rows = Vec::new();
    let mut assignments = Vec::new();
    for (b, scene) in gts.iter().enumerate() {
        for (t, vg) in scene.iter().enumerate() {
            let r = b * views + t;
            let present: Vec<usize> = (0..vg.masks.len()).filter(|&e| vg.present[e]).collect();
            let masks_p: Vec<&Mask> = present.iter().map(|&e| &vg.masks[e]).collect();
            let ce = entity_cost(&ent[r * n..(r + 1) * n], w);
            let vc = view_cost(&logits[r * n * pixels..(r + 1) * n * pixels], pixels, &masks_p, w);
            let cost = combine(&ce, &vc.mask);
            let mut a = hungarian(&cost, n, present.len())?;
            for pair in &mut a.pairs {
                pair.1 = present[pair.1];
                targets[r * n + pair.0] = 1.0;
                rows.push(MaskRow {
                    row: r * n + pair.0,
                    target: &vg.masks[pair.1],
                });
            }
            assignments.push(a);
        }
    }
    Ok((assemble(g, entity, targets, masks, &rows)?, assignments))
}

/// Batch-level terms. `entity` is `[B, N]`, `masks` `[B*T, N, h, w]`. One
/// matching per scene on the cost summed over the views where each entity
/// is present; the matched query's masks are supervised only in those views.
pub fn batch_level_loss(
    g: &mut Graph,
    entity: Var,
    masks: Var,
    gts: &[Vec<ViewGt>],
    w: &TermWeights,
) -> Result<(LevelTerms, Vec<Assignment>)> {
    let shape = g.shape(masks).to_vec();
    let (rows_bt, n, pixels) = (shape[0], shape[1], shape[2] * shape[3]);
    let batch = gts.len();
    let views = rows_bt / batch.max(1);
    check_gt(gts, batch, views, pixels)?;
    let ent = g.value(entity).data().to_vec();
    let logits = g.value(masks).data().to_vec();
    let mut targets = vec![0.0 as Real; batch * n];
    let mut rows = Vec::new();
    let mut assignments = Vec::new();
    for (b, scene) in gts.iter().enumerate() {
        let count = scene[0].masks.len();
        let present: Vec<usize> = (0..count).filter(|&e| scene.iter().any(|v| v.present[e])).collect();
        let ce = entity_cost(&ent[b * n..(b + 1) * n], w);
        let mut mask_cost = vec![vec![0.0f64; present.len()]; n];
        for (t, vg) in scene.iter().enumerate() {
            let r = b * views + t;
            let cols: Vec<usize> = (0..present.len()).filter(|&k| vg.present[present[k]]).collect();
            let masks_p: Vec<&Mask> = cols.iter().map(|&k| &vg.masks[present[k]]).collect();
            let vc = view_cost(&logits[r * n * pixels..(r + 1) * n * pixels], pixels, &masks_p, w);
            for q in 0..n {
                for (j, &k) in cols.iter().enumerate() {
                    mask_cost[q][k] += vc.mask[q][j];
                }
            }
        }
        let cost = combine(&ce, &mask_cost);
        let mut a = hungarian(&cost, n, present.len())?;
        for pair in &mut a.pairs {
            pair.1 = present[pair.1];
            targets[b * n + pair.0] = 1.0;
            for (t, vg) in scene.iter().enumerate().filter(|(_, vg)| vg.present[pair.1]) {
                rows.push(MaskRow {
                    row: (b * views + t) * n + pair.0,
                    target: &vg.masks[pair.1],
                });
            }
        }
        assignments.push(a);
    }
    Ok((assemble(g, entity, targets, masks, &rows)?, assignments))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_i: f64,
    pub bce_i: f64,
    pub dice_i: f64,
    pub ce_b: f64,
    pub bce_b: f64,
    pub dice_b: f64,
    pub total: f64,
}

/// Weighted sum of both levels' terms, plus the scalar values.
pub fn total_loss(g: &mut Graph, image: &LevelTerms, batch: &LevelTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let parts = [
        (image.ce, w.image.ce),
        (image.bce, w.image.bce),
        (image.dice, w.image.dice),
        (batch.ce, w.batch.ce),
        (batch.bce, w.batch.bce),
        (batch.dice, w.batch.dice),
    ];
    let values: Vec<f64> = parts.iter().map(|&(v, _)| g.value(v).item() as f64).collect();
    let mut total = g.scale(parts[0].0, parts[0].1 as Real);
    for &(v, wt) in &parts[1..] {
        let s = g.scale(v, wt as Real);
        total = g.add(total, s)?;
    }
    let report = LossReport {
        ce_i: values[0],
        bce_i: values[1],
        dice_i: values[2],
        ce_b: values[3],
        bce_b: values[4],
        dice_b: values[5],
        total: g.value(total).item() as f64,
    };
    if !report.total.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {report:?}")));
    }
    Ok((total, report))
}
