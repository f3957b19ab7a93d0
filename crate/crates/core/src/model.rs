//! The segmentation network: a shared convolutional encoder, an image-level
//! query decoder run per view, an association stage that ties the full-view
//! queries to every view, a batch-level decoder over all views' context, and
//! the entityness / mask heads.

use cropformer_autodiff::nn::{self, Bound, LayerNorm, Linear, MultiHeadAttention};
use cropformer_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub queries: usize,
    pub dim: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Channels of the four stride-2 encoder stages.
    pub widths: [usize; 4],
    pub ffn_dim: usize,
    /// Square model input side; must be a multiple of 16.
    pub input_size: usize,
    pub assoc_self_attn: bool,
    pub assoc_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            queries: 20,
            dim: 64,
            dec_layers: 3,
            heads: 4,
            widths: [16, 32, 48, 64],
            ffn_dim: 128,
            input_size: 256,
            assoc_self_attn: true,
            assoc_ffn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Param(format!("input size {} is not a multiple of 16", self.input_size)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Param(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.queries == 0 || self.dim == 0 || self.ffn_dim == 0 || self.widths.contains(&0) {
            return Err(Error::Param("model extents must be positive".into()));
        }
        Ok(())
    }

    /// Side of the stride-4 mask feature map.
    pub fn mask_size(&self) -> usize {
        self.input_size / 4
    }

    /// Side of the stride-16 context map.
    pub fn context_size(&self) -> usize {
        self.input_size / 16
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k;
        Conv {
            w: store.add(format!("{name}.weight"), nn::he(&[cout, cin, k, k], fan_in, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            l1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}

/// `LN(x + f(x))`
fn residual(g: &mut Graph, p: &Bound, ln: &LayerNorm, x: Var, fx: Var) -> Result<Var, TensorError> {
    let s = g.add(x, fx)?;
    ln.forward(g, p, s)
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    cross: MultiHeadAttention,
    ln1: LayerNorm,
    this: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Ffn,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderLayer {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), c.dim, c.heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c.dim),
            this: MultiHeadAttention::new(store, &format!("{name}.self"), c.dim, c.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c.dim),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c.dim, c.ffn_dim, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), c.dim),
        })
    }

    /// Cross-attention to the context, self-attention among queries, FFN.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, keys: Var, values: Var) -> Result<Var, TensorError> {
        let a = self.cross.forward(g, p, x, keys, values)?;
        let x = residual(g, p, &self.ln1, x, a)?;
        let s = self.this.forward(g, p, x, x, x)?;
        let x = residual(g, p, &self.ln2, x, s)?;
        let f = self.ffn.forward(g, p, x)?;
        residual(g, p, &self.ln3, x, f)
    }
}

#[derive(Debug, Clone)]
struct Association {
    cross: MultiHeadAttention,
    ln1: LayerNorm,
    this: Option<(MultiHeadAttention, LayerNorm)>,
    ffn: Option<(Ffn, LayerNorm)>,
}

/// Encoder outputs for a stack of views.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `[V, K, H/4, W/4]`
    pub p2: Var,
    /// `[V, S, K]` context tokens with positional encoding (attention keys).
    pub keys: Var,
    /// `[V, S, K]` context tokens (attention values).
    pub values: Var,
}

/// Graph handles for one forward pass over `batch` scenes of `views` views each.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub batch: usize,
    pub views: usize,
    /// `[B * T, N, K]`
    pub image_embeddings: Var,
    /// `[B * T, N]`
    pub image_entity: Var,
    /// `[B * T, N, H/4, W/4]`
    pub image_masks: Var,
    /// `[B, N, K]`
    pub batch_queries: Option<Var>,
    /// `[B, N, K]`
    pub batch_embeddings: Option<Var>,
    /// `[B, N]`
    pub batch_entity: Option<Var>,
    /// `[B * T, N, H/4, W/4]`, one shared embedding per query across a scene's views.
    pub batch_masks: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    queries: ParamId,
    stem: [Conv; 5],
    lateral_fine: Conv,
    lateral_coarse: Conv,
    context: Conv,
    image_decoder: Vec<DecoderLayer>,
    association: Association,
    batch_decoder: Vec<DecoderLayer>,
    entity_head: Linear,
    mask_fc1: Linear,
    mask_fc2: Linear,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [w0, w1, w2, w3] = c.widths;
        let queries = s.add("queries", nn::xavier(&[c.queries, c.dim], c.queries, c.dim, &mut rng));
        let stem = [
            Conv::new(&mut s, "enc.s1", 3, w0, 3, 2, &mut rng),
            Conv::new(&mut s, "enc.s2", w0, w1, 3, 2, &mut rng),
            Conv::new(&mut s, "enc.s2b", w1, w1, 3, 1, &mut rng),
            Conv::new(&mut s, "enc.s3", w1, w2, 3, 2, &mut rng),
            Conv::new(&mut s, "enc.s4", w2, w3, 3, 2, &mut rng),
        ];
        let lateral_fine = Conv::new(&mut s, "enc.p2_fine", w1, c.dim, 1, 1, &mut rng);
        let lateral_coarse = Conv::new(&mut s, "enc.p2_coarse", w3, c.dim, 1, 1, &mut rng);
        let context = Conv::new(&mut s, "enc.context", w3, c.dim, 1, 1, &mut rng);
        let image_decoder = (0..c.dec_layers)
            .map(|l| DecoderLayer::new(&mut s, &format!("image_dec.{l}"), c, &mut rng))
            .collect::<Result<_>>()?;
        let association = Association {
            cross: MultiHeadAttention::new(&mut s, "assoc.cross", c.dim, c.heads, &mut rng)?,
            ln1: LayerNorm::new(&mut s, "assoc.ln1", c.dim),
            this: if c.assoc_self_attn {
                Some((
                    MultiHeadAttention::new(&mut s, "assoc.self", c.dim, c.heads, &mut rng)?,
                    LayerNorm::new(&mut s, "assoc.ln2", c.dim),
                ))
            } else {
                None
            },
            ffn: if c.assoc_ffn {
                Some((
                    Ffn::new(&mut s, "assoc.ffn", c.dim, c.ffn_dim, &mut rng),
                    LayerNorm::new(&mut s, "assoc.ln3", c.dim),
                ))
            } else {
                None
            },
        };
        let batch_decoder = (0..c.dec_layers)
            .map(|l| DecoderLayer::new(&mut s, &format!("batch_dec.{l}"), c, &mut rng))
            .collect::<Result<_>>()?;
        let entity_head = Linear::new(&mut s, "head.entity", c.dim, 1, &mut rng);
        let mask_fc1 = Linear::new(&mut s, "head.mask1", c.dim, c.dim, &mut rng);
        let mask_fc2 = Linear::new(&mut s, "head.mask2", c.dim, c.dim, &mut rng);
        let positions = sine_positions(c.context_size(), c.dim);
        Ok(Model {
            config,
            params: s,
            queries,
            stem,
            lateral_fine,
            lateral_coarse,
            context,
            image_decoder,
            association,
            batch_decoder,
            entity_head,
            mask_fc1,
            mask_fc2,
            positions,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which
    /// must match it name for name and shape for shape.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for ((name, t), (want, w)) in params.iter().zip(model.params.iter()) {
            if name != want || t.shape() != w.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {want} {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Shared-weight encoder over `[V, 3, H, W]`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<Features> {
        let shape = g.shape(input).to_vec();
        let size = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::Param(format!(
                "encoder input {shape:?} does not match [V, 3, {size}, {size}]"
            )));
        }
        let v = shape[0];
        let mut x = input;
        let mut taps = Vec::with_capacity(5);
        for conv in &self.stem {
            let y = conv.forward(g, p, x)?;
            x = g.relu(y);
            taps.push(x);
        }
        let (c2, c4) = (taps[2], taps[4]);
        let fine = self.lateral_fine.forward(g, p, c2)?;
        let coarse = self.lateral_coarse.forward(g, p, c4)?;
        let coarse = g.upsample_nearest(coarse, 4)?;
        let p2 = g.add(fine, coarse)?;

        let k = self.config.dim;
        let s = self.config.context_size().pow(2);
        let ctx = self.context.forward(g, p, c4)?;
        let ctx = g.reshape(ctx, &[v, k, s])?;
        let values = g.permute(ctx, &[0, 2, 1])?;
        let pos = g.constant(self.positions.clone());
        let keys = g.add(values, pos)?;
        Ok(Features { p2, keys, values })
    }

    fn decode(
        &self,
        layers: &[DecoderLayer],
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var, TensorError> {
        for layer in layers {
            x = layer.forward(g, p, x, keys, values)?;
        }
        Ok(x)
    }

    /// Learned queries decoded against each view's own context: `[V, N, K]`.
    pub fn image_decoder(&self, g: &mut Graph, p: &Bound, f: &Features) -> Result<Var> {
        let v = g.shape(f.keys)[0];
        let q = g.expand_leading(p.var(self.queries), v)?;
        Ok(self.decode(&self.image_decoder, g, p, q, f.keys, f.values)?)
    }

    /// Image-level embeddings `[B * T, N, K]` (view 0 of each scene is the
    /// full image) to batch queries `[B, N, K]`. Keys and values are the
    /// embeddings of every view, flattened query-major (`n * T + t`).
    pub fn associate(&self, g: &mut Graph, p: &Bound, e_i: Var, batch: usize, views: usize) -> Result<Var> {
        let (n, k) = (self.config.queries, self.config.dim);
        let e = g.reshape(e_i, &[batch, views, n, k])?;
        let full = g.narrow(e, 1, 0, 1)?;
        let full = g.reshape(full, &[batch, n, k])?;
        let all = g.permute(e, &[0, 2, 1, 3])?;
        let all = g.reshape(all, &[batch, n * views, k])?;
        let a = &self.association;
        let y = a.cross.forward(g, p, full, all, all)?;
        let mut x = residual(g, p, &a.ln1, full, y)?;
        if let Some((att, ln)) = &a.this {
            let y = att.forward(g, p, x, x, x)?;
            x = residual(g, p, ln, x, y)?;
        }
        if let Some((ffn, ln)) = &a.ffn {
            let y = ffn.forward(g, p, x)?;
            x = residual(g, p, ln, x, y)?;
        }
        Ok(x)
    }

    /// Association attention weights `[1, heads, N, N * T]` for a single scene.
    pub fn association_weights(&self, g: &mut Graph, p: &Bound, e_i: Var, views: usize) -> Result<Var> {
        let (n, k) = (self.config.queries, self.config.dim);
        let e = g.reshape(e_i, &[views, n, k])?;
        let full = g.narrow(e, 0, 0, 1)?;
        let full = g.reshape(full, &[n, k])?;
        let all = g.permute(e, &[1, 0, 2])?;
        let all = g.reshape(all, &[n * views, k])?;
        Ok(self.association.cross.weights(g, p, full, all)?)
    }

    /// Batch queries `[B, N, K]` decoded against the concatenated context of
    /// each scene's views.
    pub fn batch_decoder(&self, g: &mut Graph, p: &Bound, q_b: Var, f: &Features, batch: usize, views: usize) -> Result<Var> {
        let (s, k) = (g.shape(f.keys)[1], self.config.dim);
        let keys = g.reshape(f.keys, &[batch, views * s, k])?;
        let values = g.reshape(f.values, &[batch, views * s, k])?;
        Ok(self.decode(&self.batch_decoder, g, p, q_b, keys, values)?)
    }

    /// Entityness logits `[.., N]` and mask filters `[.., N, K]`.
    fn heads(&self, g: &mut Graph, p: &Bound, emb: Var) -> Result<(Var, Var)> {
        let shape = g.shape(emb).to_vec();
        let e = self.entity_head.forward(g, p, emb)?;
        let e = g.reshape(e, &shape[..shape.len() - 1])?;
        let h = self.mask_fc1.forward(g, p, emb)?;
        let h = g.relu(h);
        let m = self.mask_fc2.forward(g, p, h)?;
        Ok((e, m))
    }

    /// Per-view predictions from per-view embeddings `[V, N, K]`.
    pub fn predict(&self, g: &mut Graph, p: &Bound, emb: Var, p2: Var) -> Result<(Var, Var)> {
        let (e, filters) = self.heads(g, p, emb)?;
        let masks = g.apply_mask_filters(filters, p2)?;
        Ok((e, masks))
    }

    /// Batch-level predictions: one entityness per query `[B, N]` and mask
    /// logits from the embedding broadcast to every view `[B * T, N, h, w]`.
    pub fn predict_batch(&self, g: &mut Graph, p: &Bound, emb: Var, p2: Var, batch: usize, views: usize) -> Result<(Var, Var)> {
        let (n, k) = (self.config.queries, self.config.dim);
        let (e, filters) = self.heads(g, p, emb)?;
        let f = g.reshape(filters, &[batch, 1, n, k])?;
        let f = g.concat(&vec![f; views], 1)?;
        let f = g.reshape(f, &[batch * views, n, k])?;
        let masks = g.apply_mask_filters(f, p2)?;
        Ok((e, masks))
    }

    /// Full forward pass over `input` `[B * T, 3, H, W]` (scene-major).
    /// `with_batch` false skips the association and batch-level stages.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Tensor, batch: usize, views: usize, with_batch: bool) -> Result<Outputs> {
        if input.shape()[0] != batch * views {
            return Err(Error::Dimension {
                op: "forward",
                lhs: input.shape().to_vec(),
                rhs: vec![batch, views],
            });
        }
        let x = g.constant(input);
        let f = self.encode(g, p, x)?;
        let e_i = self.image_decoder(g, p, &f)?;
        let (image_entity, image_masks) = self.predict(g, p, e_i, f.p2)?;
        let mut out = Outputs {
            batch,
            views,
            image_embeddings: e_i,
            image_entity,
            image_masks,
            batch_queries: None,
            batch_embeddings: None,
            batch_entity: None,
            batch_masks: None,
        };
        if with_batch {
            let q_b = self.associate(g, p, e_i, batch, views)?;
            let e_b = self.batch_decoder(g, p, q_b, &f, batch, views)?;
            let (be, bm) = self.predict_batch(g, p, e_b, f.p2, batch, views)?;
            out.batch_queries = Some(q_b);
            out.batch_embeddings = Some(e_b);
            out.batch_entity = Some(be);
            out.batch_masks = Some(bm);
        }
        Ok(out)
    }
}

/// Stacks rasters into the network's `[V, 3, H, W]` input, centred and scaled.
pub fn input_tensor(views: &[&Raster]) -> Result<Tensor> {
    let first = views.first().ok_or_else(|| Error::Param("no views".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(views.len() * 3 * w * h);
    for r in views {
        if (r.width, r.height, r.channels) != (w, h, 3) {
            return Err(Error::Dimension {
                op: "input_tensor",
                lhs: vec![3, h, w],
                rhs: vec![r.channels, r.height, r.width],
            });
        }
        data.extend(r.to_planar().into_iter().map(|v| ((v - 0.5) * 4.0) as Real));
    }
    Ok(Tensor::new(vec![views.len(), 3, h, w], data)?)
}

/// Two-dimensional sinusoidal encoding `[side * side, dim]`: the first half
/// of the channels encodes the row, the second half the column.
pub fn sine_positions(side: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let pairs = (half / 2).max(1);
    Tensor::from_fn(&[side * side, dim], |i| {
        let (tok, c) = (i / dim, i % dim);
        let (y, x) = (tok / side, tok % side);
        let (pos, c) = if c < half { (y, c) } else { (x, c - half) };
        let freq = 1.0 / 10000f64.powf((c / 2) as f64 / pairs as f64);
        let a = pos as f64 * freq;
        (if c % 2 == 0 { a.sin() } else { a.cos() }) as Real
    })
}
