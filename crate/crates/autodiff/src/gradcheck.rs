//! Finite-difference gradient checker.
//!
//! Only forward evaluation is used on the numeric side: the scalar readout
//! `sum(w * f(x))` (random fixed `w`, accumulated in f64) is differentiated
//! with a fourth-order central stencil and compared to the tape's gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub rel_error: f64,
    pub numeric_norm: f64,
    pub checked: usize,
}

/// Default stencil step relative to `max(1, |x|)`.
pub fn default_step() -> f64 {
    if std::mem::size_of::<Real>() == 4 {
        1e-2
    } else {
        1e-4
    }
}

pub fn check<F>(inputs: &[Tensor], build: F, seed: u64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    check_with_step(inputs, build, seed, default_step())
}

pub fn check_with_step<F>(inputs: &[Tensor], build: F, seed: u64, step: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0) as Real);
    g.backward_with(out, weights.clone())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let readout = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum())
    };

    let (mut diff, mut an, mut nn, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let h = step * (x0.abs() as f64).max(1.0);
            let mut at = |delta: f64| -> Result<f64, TensorError> {
                work[i].data_mut()[j] = (x0 as f64 + delta) as Real;
                readout(&work)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[i].data_mut()[j] = x0;
            let num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic[i][j];
            diff += (a - num).powi(2);
            an += a * a;
            nn += num * num;
            checked += 1;
        }
    }
    let denom = an.sqrt().max(nn.sqrt()).max(1e-12);
    Ok(GradReport {
        rel_error: diff.sqrt() / denom,
        numeric_norm: nn.sqrt(),
        checked,
    })
}

/// Tensor of uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as Real)
}

/// One differentiable op exercised on random inputs.
pub struct GradCase {
    pub name: &'static str,
    run: fn(u64) -> Result<GradReport, TensorError>,
}

impl GradCase {
    /// Draws a fresh instance from `seed` and checks it.
    pub fn run(&self, seed: u64) -> Result<GradReport, TensorError> {
        (self.run)(seed)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        (if rng.random_bool(0.5) { m } else { -m }) as Real
    })
}

fn binary_targets(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

fn dims(rng: &mut impl Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Every differentiable op on the tape, plus multi-head attention.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 1, 5);
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            let b = random_tensor(&sh[1..], -1.0, 1.0, &mut r);
            check(&[a, b], |g, v| g.add(v[0], v[1]), s)
        }},
        GradCase { name: "sub", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 1, 5);
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            let b = random_tensor(&sh, -1.0, 1.0, &mut r);
            check(&[a, b], |g, v| g.sub(v[0], v[1]), s)
        }},
        GradCase { name: "mul", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 3, 1, 4);
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            let b = random_tensor(&sh[1..], -1.0, 1.0, &mut r);
            check(&[a, b], |g, v| g.mul(v[0], v[1]), s)
        }},
        GradCase { name: "scale", run: |s| {
            let mut r = rng_for(s);
            let a = random_tensor(&dims(&mut r, 2, 1, 6), -1.0, 1.0, &mut r);
            let f = r.random_range(-2.0..2.0) as Real;
            check(&[a], move |g, v| Ok(g.scale(v[0], f)), s)
        }},
        GradCase { name: "relu", run: |s| {
            let mut r = rng_for(s);
            let a = away_from_zero(&dims(&mut r, 2, 1, 6), &mut r);
            check(&[a], |g, v| Ok(g.relu(v[0])), s)
        }},
        GradCase { name: "sigmoid", run: |s| {
            let mut r = rng_for(s);
            let a = random_tensor(&dims(&mut r, 2, 1, 6), -4.0, 4.0, &mut r);
            check(&[a], |g, v| Ok(g.sigmoid(v[0])), s)
        }},
        GradCase { name: "sum_all", run: |s| {
            let mut r = rng_for(s);
            let a = random_tensor(&dims(&mut r, 3, 1, 4), -1.0, 1.0, &mut r);
            check(&[a], |g, v| Ok(g.sum_all(v[0])), s)
        }},
        GradCase { name: "mean_all", run: |s| {
            let mut r = rng_for(s);
            let a = random_tensor(&dims(&mut r, 3, 1, 4), -1.0, 1.0, &mut r);
            check(&[a], |g, v| Ok(g.mean_all(v[0])), s)
        }},
        GradCase { name: "reshape", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 1, 6);
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            check(&[a], move |g, v| g.reshape(v[0], &[sh[1], sh[0]]), s)
        }},
        GradCase { name: "permute", run: |s| {
            let mut r = rng_for(s);
            let a = random_tensor(&dims(&mut r, 4, 1, 4), -1.0, 1.0, &mut r);
            let mut perm = [0usize, 1, 2, 3];
            perm.rotate_left(r.random_range(1..4));
            check(&[a], move |g, v| g.permute(v[0], &perm), s)
        }},
        GradCase { name: "concat", run: |s| {
            let mut r = rng_for(s);
            let axis = r.random_range(0..3);
            let mut sa = dims(&mut r, 3, 1, 4);
            let a = random_tensor(&sa, -1.0, 1.0, &mut r);
            sa[axis] = r.random_range(1..=4);
            let b = random_tensor(&sa, -1.0, 1.0, &mut r);
            check(&[a, b], move |g, v| g.concat(&[v[0], v[1], v[0]], axis), s)
        }},
        GradCase { name: "narrow", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 3, 2, 6);
            let axis = r.random_range(0..3);
            let start = r.random_range(0..sh[axis] - 1);
            let len = r.random_range(1..=sh[axis] - start);
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            check(&[a], move |g, v| g.narrow(v[0], axis, start, len), s)
        }},
        GradCase { name: "index_select", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 2, 6);
            let idx: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..sh[0])).collect();
            let a = random_tensor(&sh, -1.0, 1.0, &mut r);
            check(&[a], move |g, v| g.index_select(v[0], &idx), s)
        }},
        GradCase { name: "expand_leading", run: |s| {
            let mut r = rng_for(s);
            let n = r.random_range(1..=4);
            let a = random_tensor(&dims(&mut r, 2, 1, 5), -1.0, 1.0, &mut r);
            check(&[a], move |g, v| g.expand_leading(v[0], n), s)
        }},
        GradCase { name: "matmul", run: |s| {
            let mut r = rng_for(s);
            let d = dims(&mut r, 4, 1, 5);
            let a = random_tensor(&[d[0], d[1], d[2]], -1.0, 1.0, &mut r);
            let b = if r.random_bool(0.5) {
                random_tensor(&[d[2], d[3]], -1.0, 1.0, &mut r)
            } else {
                random_tensor(&[d[0], d[2], d[3]], -1.0, 1.0, &mut r)
            };
            check(&[a, b], |g, v| g.matmul(v[0], v[1]), s)
        }},
        GradCase { name: "softmax", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 3, 1, 5);
            let axis = r.random_range(0..3);
            let a = random_tensor(&sh, -3.0, 3.0, &mut r);
            check(&[a], move |g, v| g.softmax(v[0], axis), s)
        }},
        GradCase { name: "layer_norm", run: |s| {
            let mut r = rng_for(s);
            // two-element rows normalise to exactly +-1 and carry no gradient
            let mut sh = dims(&mut r, 2, 1, 6);
            let axis = r.random_range(0..2);
            sh[axis] = r.random_range(3..=6);
            let a = random_tensor(&sh, -2.0, 2.0, &mut r);
            check(&[a], move |g, v| g.layer_norm(v[0], axis, 1e-5), s)
        }},
        GradCase { name: "conv2d", run: |s| {
            let mut r = rng_for(s);
            let (c, o) = (r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3][r.random_range(0..2)];
            let stride = r.random_range(1..=2);
            let hw = r.random_range(k.max(2)..=6);
            let x = random_tensor(&[2, c, hw, hw], -1.0, 1.0, &mut r);
            let w = random_tensor(&[o, c, k, k], -1.0, 1.0, &mut r);
            let b = random_tensor(&[o], -1.0, 1.0, &mut r);
            let pad = k / 2;
            check(&[x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad), s)
        }},
        GradCase { name: "upsample_nearest", run: |s| {
            let mut r = rng_for(s);
            let f = r.random_range(1..=3);
            let a = random_tensor(&dims(&mut r, 4, 1, 3), -1.0, 1.0, &mut r);
            check(&[a], move |g, v| g.upsample_nearest(v[0], f), s)
        }},
        GradCase { name: "apply_mask_filters", run: |s| {
            let mut r = rng_for(s);
            let d = dims(&mut r, 4, 1, 5);
            let e = random_tensor(&[d[0], d[1]], -1.0, 1.0, &mut r);
            let f = random_tensor(&[d[1], d[2], d[3]], -1.0, 1.0, &mut r);
            check(&[e, f], |g, v| g.apply_mask_filters(v[0], v[1]), s)
        }},
        GradCase { name: "sigmoid_bce", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 1, 6);
            let x = random_tensor(&sh, -4.0, 4.0, &mut r);
            let t = binary_targets(&sh, &mut r);
            check(&[x], move |g, v| g.sigmoid_bce(v[0], t.clone()), s)
        }},
        GradCase { name: "dice_loss", run: |s| {
            let mut r = rng_for(s);
            let sh = dims(&mut r, 2, 1, 6);
            let x = random_tensor(&sh, -3.0, 3.0, &mut r);
            let t = binary_targets(&sh, &mut r);
            check(&[x], move |g, v| g.dice_loss(v[0], t.clone(), 1.0), s)
        }},
        GradCase { name: "multi_head_attention", run: |s| {
            let mut r = rng_for(s);
            let heads = r.random_range(1..=2);
            let dim = 4 * heads;
            let (nq, ns) = (r.random_range(1..=4), r.random_range(1..=4));
            let mut store = crate::ParamStore::new();
            let mha = crate::nn::MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut r)?;
            let mut inputs = vec![
                random_tensor(&[nq, dim], -1.0, 1.0, &mut r),
                random_tensor(&[ns, dim], -1.0, 1.0, &mut r),
                random_tensor(&[ns, dim], -1.0, 1.0, &mut r),
            ];
            inputs.extend(store.iter().map(|(_, t)| t.clone()));
            check(&inputs, move |g, v| {
                let p = crate::nn::Bound::from_vars(v[3..].to_vec());
                mha.forward(g, &p, v[0], v[1], v[2])
            }, s)
        }},
    ]
}
