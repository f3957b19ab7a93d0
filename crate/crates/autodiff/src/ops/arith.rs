//! Elementwise ops and full reductions.
//!
//! Binary ops accept `b` whose shape is a suffix of `a`'s shape; `b` is then
//! repeated over the leading axes of `a`. No other broadcasting exists.

use crate::graph::{GradSink, Op};
use crate::{Graph, Real, Tensor, TensorError, Var};

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Graph {
    /// `a + b`, with `b` repeated over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        check_suffix("add", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(bn) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product, with `b` repeated over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        check_suffix("mul", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(bn) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x *= y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(t, Op::Sigmoid { a }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<Real>();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<Real>() / v.numel() as Real;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, rg)
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn add_backward(a: Var, b: Var, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    }
    if let Some(gb) = sink.buf(b) {
        let bn = gb.len();
        for chunk in g.chunks_exact(bn) {
            gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
        }
    }
}

pub(crate) fn mul_backward(a: Var, b: Var, g: &[Real], sink: &mut GradSink<'_>) {
    let av = sink.value(a).data();
    let bv = sink.value(b).data();
    let bn = bv.len();
    if let Some(ga) = sink.buf(a) {
        for (r, chunk) in ga.chunks_exact_mut(bn).enumerate() {
            let gc = &g[r * bn..(r + 1) * bn];
            for ((x, gy), bb) in chunk.iter_mut().zip(gc).zip(bv) {
                *x += gy * bb;
            }
        }
    }
    if let Some(gb) = sink.buf(b) {
        for (gc, ac) in g.chunks_exact(bn).zip(av.chunks_exact(bn)) {
            for ((x, gy), aa) in gb.iter_mut().zip(gc).zip(ac) {
                *x += gy * aa;
            }
        }
    }
}

pub(crate) fn scale_backward(a: Var, factor: Real, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
    }
}

pub(crate) fn relu_backward(a: Var, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        for ((x, gy), o) in ga.iter_mut().zip(g).zip(out.data()) {
            if *o > 0.0 {
                *x += gy;
            }
        }
    }
}

pub(crate) fn sigmoid_backward(a: Var, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        for ((x, gy), s) in ga.iter_mut().zip(g).zip(out.data()) {
            *x += gy * s * (1.0 - s);
        }
    }
}

pub(crate) fn sum_backward(a: Var, factor: Real, g: &[Real], sink: &mut GradSink<'_>) {
    let d = g[0] * factor;
    if let Some(ga) = sink.buf(a) {
        ga.iter_mut().for_each(|x| *x += d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_add_repeats_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.variable(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_suffix_broadcast_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(x, b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
