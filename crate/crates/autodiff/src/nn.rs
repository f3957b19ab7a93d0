//! Named parameters and the small layer set the model is assembled from.

use rand::Rng;

use crate::{Graph, Real, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter set. Order is registration order and is the
/// order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.variable(t.clone())).collect(),
        }
    }

    /// Places every parameter on `graph` as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }
}

/// Parameters placed on a particular graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds store parameters to existing graph nodes, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter in store order (`None` if unreached).
    pub fn grads(&self, graph: &Graph) -> Vec<Option<Vec<Real>>> {
        self.vars.iter().map(|&v| graph.grad(v).map(<[Real]>::to_vec)).collect()
    }
}

/// Uniform Glorot initialisation.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a) as Real)
}

/// Uniform He initialisation for ReLU layers.
pub fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a) as Real)
}

/// `y = x W + b` over the last axis. `W` is stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(&[fan_in, fan_out], fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Square layer initialised to the identity map with zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        let weight = store.add(format!("{name}.weight"), eye);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self {
            weight,
            bias,
            fan_in: dim,
            fan_out: dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: Real,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let axis = g.shape(x).len() - 1;
        let n = g.layer_norm(x, axis, self.eps)?;
        let s = g.mul(n, p.var(self.gamma))?;
        g.add(s, p.var(self.beta))
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
///
/// Inputs are `[Q, D]`/`[S, D]` or batched `[B, Q, D]`/`[B, S, D]`. Scores are
/// scaled by `1/sqrt(D / heads)`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        check_heads(dim, heads)?;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// All four projections set to the identity.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self, TensorError> {
        check_heads(dim, heads)?;
        Ok(Self {
            q: Linear::identity(store, &format!("{name}.q"), dim),
            k: Linear::identity(store, &format!("{name}.k"), dim),
            v: Linear::identity(store, &format!("{name}.v"), dim),
            out: Linear::identity(store, &format!("{name}.out"), dim),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, query: Var, key: Var, value: Var) -> Result<Var, TensorError> {
        let unbatched = g.shape(query).len() == 2;
        let lift = |g: &mut Graph, x: Var| -> Result<Var, TensorError> {
            if g.shape(x).len() == 2 {
                let mut s = vec![1];
                s.extend_from_slice(g.shape(x));
                g.reshape(x, &s)
            } else {
                Ok(x)
            }
        };
        let (query, key, value) = (lift(g, query)?, lift(g, key)?, lift(g, value)?);
        let qs = g.shape(query).to_vec();
        let ks = g.shape(key).to_vec();
        let vs = g.shape(value).to_vec();
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[2] != self.dim || ks[2] != self.dim || qs[0] != ks[0] {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (b, nq, ns) = (qs[0], qs[1], ks[1]);
        let (h, d) = (self.heads, self.dim / self.heads);

        let q = self.q.forward(g, p, query)?;
        let q = g.reshape(q, &[b, nq, h, d])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(g, p, key)?;
        let k = g.reshape(k, &[b, ns, h, d])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(g, p, value)?;
        let v = g.reshape(v, &[b, ns, h, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as Real).sqrt());
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, nq, self.dim])?;
        let y = self.out.forward(g, p, ctx)?;
        if unbatched {
            g.reshape(y, &[nq, self.dim])
        } else {
            Ok(y)
        }
    }

    /// Attention weights `[B, heads, Q, S]` for inspection.
    pub fn weights(&self, g: &mut Graph, p: &Bound, query: Var, key: Var) -> Result<Var, TensorError> {
        let (h, d) = (self.heads, self.dim / self.heads);
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let (nq, ns) = (g.shape(q)[0], g.shape(k)[0]);
        let q = g.reshape(q, &[1, nq, h, d])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[1, ns, h, d])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let s = g.matmul(q, k)?;
        let s = g.scale(s, 1.0 / (d as Real).sqrt());
        g.softmax(s, 3)
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<(), TensorError> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(TensorError::Config(format!(
            "embedding dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadAttention::new(&mut store, "att", 10, 4, &mut rng).unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::identity(&mut store, "att", 4, 2).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let q = g.constant(Tensor::from_fn(&[3, 4], |i| i as Real * 0.3));
        let kv = g.constant(Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 7.0]).unwrap());
        let y = att.forward(&mut g, &p, q, kv, kv).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 7.0]);
        }
    }

    #[test]
    fn identical_keys_split_weight_evenly() {
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::identity(&mut store, "att", 4, 2).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let q = g.constant(Tensor::from_fn(&[2, 4], |i| i as Real));
        let k = g.constant(Tensor::from_fn(&[2, 4], |i| (i % 4) as Real));
        let w = att.weights(&mut g, &p, q, k).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 0.5).abs() < 1e-7));
    }

    #[test]
    fn store_lookup_by_name() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "head", 3, 2, &mut rng);
        assert_eq!(store.find("head.bias"), Some(lin.bias));
        assert_eq!(store.name(lin.weight), "head.weight");
        assert_eq!(store.numel(), 8);
    }
}
