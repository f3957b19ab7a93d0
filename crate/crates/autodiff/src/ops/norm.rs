use crate::graph::{GradSink, Op};
use crate::tensor::split_at_axis;
use crate::{Graph, Real, Tensor, TensorError, Var};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        })
    }
}

impl Graph {
    /// Softmax along `axis`, computed after subtracting the per-lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for k in 0..n {
                    mx = mx.max(src[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for k in 0..n {
                    out[at(k)] *= inv;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Softmax { a, axis }, rg))
    }

    /// Normalises to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: Real) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        check_axis("layer_norm", &shape, axis)?;
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mean = (0..n).map(|k| src[at(k)]).sum::<Real>() / n as Real;
                let var = (0..n).map(|k| (src[at(k)] - mean).powi(2)).sum::<Real>() / n as Real;
                let r = 1.0 / (var + eps).sqrt();
                for k in 0..n {
                    out[at(k)] = (src[at(k)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::LayerNorm { a, axis, rstd }, rg))
    }
}

pub(crate) fn softmax_backward(a: Var, axis: usize, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let (outer, n, inner) = split_at_axis(out.shape(), axis);
    let y = out.data();
    if let Some(ga) = sink.buf(a) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let dot: Real = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..n {
                    ga[at(k)] += y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
    }
}

pub(crate) fn layer_norm_backward(
    a: Var,
    axis: usize,
    rstd: &[Real],
    out: &Tensor,
    g: &[Real],
    sink: &mut GradSink<'_>,
) {
    let (outer, n, inner) = split_at_axis(out.shape(), axis);
    let y = out.data();
    if let Some(ga) = sink.buf(a) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let r = rstd[o * inner + i];
                let mg = (0..n).map(|k| g[at(k)]).sum::<Real>() / n as Real;
                let mgy = (0..n).map(|k| g[at(k)] * y[at(k)]).sum::<Real>() / n as Real;
                for k in 0..n {
                    ga[at(k)] += r * (g[at(k)] - mg - y[at(k)] * mgy);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_softmax(v: &[Real]) -> Vec<Real> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        let y = g.softmax(x, 0).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        for p in run_softmax(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = run_softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-30);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as Real).sin()));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: Real = (0..3).map(|k| v.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_limits() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[5], 3.25));
        let y = g.layer_norm(c, 0, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let two = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(two, 0, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
        assert!(g.layer_norm(two, 0, 0.0).is_err());
    }
}
