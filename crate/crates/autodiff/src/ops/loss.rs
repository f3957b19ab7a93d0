//! Fused mask losses over the last axis. Targets are constants.

use crate::graph::{GradSink, Op};
use crate::ops::arith::sigmoid;
use crate::{Graph, Real, Tensor, TensorError, Var};

fn row_shape(op: &'static str, logits: &[usize], targets: &[usize]) -> Result<Vec<usize>, TensorError> {
    if logits != targets {
        return Err(TensorError::Shape {
            op,
            lhs: logits.to_vec(),
            rhs: targets.to_vec(),
        });
    }
    let mut s = logits[..logits.len() - 1].to_vec();
    if s.is_empty() {
        s.push(1);
    }
    Ok(s)
}

/// Binary cross-entropy of `sigmoid(x)` against `t`, stable for any finite `x`.
pub fn bce_with_logits(x: Real, t: Real) -> Real {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

impl Graph {
    /// Mean binary cross-entropy with logits along the last axis; one value per row.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Tensor) -> Result<Var, TensorError> {
        let shape = row_shape("sigmoid_bce", self.shape(logits), targets.shape())?;
        let p = *self.shape(logits).last().expect("rank >= 1");
        let x = self.value(logits).data();
        let out: Vec<Real> = x
            .chunks_exact(p)
            .zip(targets.data().chunks_exact(p))
            .map(|(xr, tr)| xr.iter().zip(tr).map(|(&a, &b)| bce_with_logits(a, b)).sum::<Real>() / p as Real)
            .collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(t, Op::SigmoidBce { logits, targets }, rg))
    }

    /// Smoothed dice loss `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` with
    /// `p = sigmoid(x)`, per row of the last axis.
    pub fn dice_loss(&mut self, logits: Var, targets: Tensor, eps: Real) -> Result<Var, TensorError> {
        let shape = row_shape("dice_loss", self.shape(logits), targets.shape())?;
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!("dice smoothing must be positive, got {eps}")));
        }
        let p = *self.shape(logits).last().expect("rank >= 1");
        let x = self.value(logits).data();
        let out: Vec<Real> = x
            .chunks_exact(p)
            .zip(targets.data().chunks_exact(p))
            .map(|(xr, tr)| {
                let (num, den) = dice_sums(xr, tr, eps);
                1.0 - num / den
            })
            .collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(t, Op::Dice { logits, targets, eps }, rg))
    }
}

fn dice_sums(x: &[Real], t: &[Real], eps: Real) -> (Real, Real) {
    let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(t) {
        let p = sigmoid(a);
        pt += p * b;
        ps += p;
        ts += b;
    }
    (2.0 * pt + eps, ps + ts + eps)
}

pub(crate) fn sigmoid_bce_backward(logits: Var, targets: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let x = sink.value(logits).data();
    let p = *sink.value(logits).shape().last().expect("rank >= 1");
    if let Some(gx) = sink.buf(logits) {
        for (r, ((gr, xr), tr)) in gx
            .chunks_exact_mut(p)
            .zip(x.chunks_exact(p))
            .zip(targets.data().chunks_exact(p))
            .enumerate()
        {
            let scale = g[r] / p as Real;
            for ((d, &a), &b) in gr.iter_mut().zip(xr).zip(tr) {
                *d += scale * (sigmoid(a) - b);
            }
        }
    }
}

pub(crate) fn dice_backward(logits: Var, targets: &Tensor, eps: Real, g: &[Real], sink: &mut GradSink<'_>) {
    let x = sink.value(logits).data();
    let p = *sink.value(logits).shape().last().expect("rank >= 1");
    if let Some(gx) = sink.buf(logits) {
        for (r, ((gr, xr), tr)) in gx
            .chunks_exact_mut(p)
            .zip(x.chunks_exact(p))
            .zip(targets.data().chunks_exact(p))
            .enumerate()
        {
            let (num, den) = dice_sums(xr, tr, eps);
            // d/dp_j of -num/den = -(2 t_j den - num) / den^2
            let inv = 1.0 / (den * den);
            for ((d, &a), &b) in gr.iter_mut().zip(xr).zip(tr) {
                let s = sigmoid(a);
                *d += g[r] * -(2.0 * b * den - num) * inv * s * (1.0 - s);
            }
        }
    }
}
