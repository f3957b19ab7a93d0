//! Layout ops. None of them mutate their input buffers.

use crate::graph::{GradSink, Op};
use crate::tensor::{check_shape, split_at_axis, strides};
use crate::{Graph, Real, Tensor, TensorError, Var};

impl Graph {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        check_shape(shape)?;
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Config(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(a).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*inputs.first().ok_or_else(|| TensorError::Config("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Config(format!(
                "narrow [{start}, {}) outside extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Narrow { a, axis, start }, rg))
    }

    /// Gathers slices along axis 0. Indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if indices.is_empty() {
            return Err(TensorError::Config("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Config(format!("index {bad} outside extent {}", shape[0])));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            t,
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats `a` along a new leading axis of extent `count`. Every slice is a
    /// bitwise copy of `a`.
    pub fn expand_leading(&mut self, a: Var, count: usize) -> Result<Var, TensorError> {
        if count == 0 {
            return Err(TensorError::Config("expand to zero copies".into()));
        }
        let src = self.value(a);
        let mut shape = vec![count];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(count * src.numel());
        for _ in 0..count {
            data.extend_from_slice(src.data());
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::ExpandLeading { a }, rg))
    }
}

fn permute_data(src: &[Real], shape: &[usize], perm: &[usize]) -> Vec<Real> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| src[base + i * inner_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn reshape_backward(a: Var, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    }
}

pub(crate) fn permute_backward(a: Var, perm: &[usize], out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    if !sink.wants(a) {
        return;
    }
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let back = permute_data(g, out.shape(), &inverse);
    if let Some(ga) = sink.buf(a) {
        ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
    }
}

pub(crate) fn concat_backward(inputs: &[Var], axis: usize, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let (outer, _, inner) = split_at_axis(out.shape(), axis);
    let total = out.shape()[axis] * inner;
    let mut offset = 0;
    for &v in inputs {
        let len = sink.value(v).shape()[axis] * inner;
        if let Some(gv) = sink.buf(v) {
            for o in 0..outer {
                let src = &g[o * total + offset..o * total + offset + len];
                gv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(x, y)| *x += y);
            }
        }
        offset += len;
    }
}

pub(crate) fn narrow_backward(a: Var, axis: usize, start: usize, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let in_shape = sink.value(a).shape();
    let (outer, n, inner) = split_at_axis(in_shape, axis);
    let len = out.shape()[axis];
    if let Some(ga) = sink.buf(a) {
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            let src = &g[o * len * inner..(o + 1) * len * inner];
            ga[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
        }
    }
}

pub(crate) fn index_select_backward(a: Var, indices: &[usize], g: &[Real], sink: &mut GradSink<'_>) {
    let row: usize = sink.value(a).shape()[1..].iter().product();
    if let Some(ga) = sink.buf(a) {
        for (k, &i) in indices.iter().enumerate() {
            let src = &g[k * row..(k + 1) * row];
            ga[i * row..(i + 1) * row].iter_mut().zip(src).for_each(|(x, y)| *x += y);
        }
    }
}

pub(crate) fn expand_leading_backward(a: Var, g: &[Real], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.buf(a) {
        let n = ga.len();
        for chunk in g.chunks_exact(n) {
            ga.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let src: Vec<Real> = (0..24).map(|i| i as Real).collect();
        let out = permute_data(&src, &shape, &[2, 0, 1]);
        // out[k][i][j] = src[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[k * 6 + i * 3 + j], src[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as Real));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as Real));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let back = g.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn bad_permutation_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.permute(a, &[0]).is_err());
    }
}
