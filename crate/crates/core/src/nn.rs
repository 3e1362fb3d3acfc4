//! Network building blocks: parameter storage, linear and normalization
//! layers, multi-head attention, Transformer layers and the convolutional
//! subsampler.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, conv_out_len, ConvGeometry, Gradients, Tape, Var, MASK_BIAS};
use crate::error::{Error, Result};
use crate::tensor::{sinusoidal_pe, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Ordered, named collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("assign", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape())));
            }
            p.value = Arc::new(v);
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.constant(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.constant(name, t)
    }
}

/// Per-forward-pass binding of parameters onto a tape, plus the dropout
/// state of the pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Arc<Tensor>>,
    trainable: Option<Vec<bool>>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t> Ctx<'t> {
    /// Inference binding: nothing requires gradients, dropout is off.
    pub fn inference(tape: &'t Tape, params: &ParamStore) -> Self {
        Self {
            tape,
            params: params.iter().map(|p| Arc::clone(&p.value)).collect(),
            trainable: None,
            bound: RefCell::new(vec![None; params.len()]),
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training binding. `trainable[i]` controls whether parameter `i`
    /// receives a gradient. Dropout is active when `dropout > 0` and an RNG
    /// is supplied.
    pub fn training(
        tape: &'t Tape,
        params: &ParamStore,
        trainable: Vec<bool>,
        dropout: f64,
        rng: Option<ChaCha8Rng>,
    ) -> Self {
        assert_eq!(trainable.len(), params.len());
        Self {
            tape,
            params: params.iter().map(|p| Arc::clone(&p.value)).collect(),
            trainable: Some(trainable),
            bound: RefCell::new(vec![None; params.len()]),
            dropout,
            rng: rng.map(RefCell::new),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let rg = self.trainable.as_ref().is_some_and(|t| t[id.0]);
        let v = self.tape.leaf_shared(Arc::clone(&self.params[id.0]), rg);
        bound[id.0] = Some(v);
        v
    }

    /// Routes every use of parameter `id` in this pass to `var` instead of
    /// the stored value. Used to probe gradients with respect to a single
    /// parameter tensor.
    pub fn substitute(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    /// Node bound to `id` in this pass, if the forward used it.
    pub fn bound(&self, id: ParamId) -> Option<Var<'t>> {
        self.bound.borrow()[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        let Some(rng) = &self.rng else { return Ok(x) };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = x.value().numel();
        let mut rng = rng.borrow_mut();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.dropout_with_mask(mask)
    }

    /// Extracts per-parameter gradients (zeros for untouched parameters).
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Boolean attention scope: `allowed(q, k)` is true when query `q` may
/// attend key `k`. Every query must be allowed at least one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("attention_mask", format!("{rows}x{cols} vs {}", allowed.len())));
        }
        for r in 0..rows {
            if !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(Error::EmptyMaskRow { row: r });
            }
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Self { rows: n, cols: n, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    /// Additive pre-softmax bias: 0 where allowed, [`MASK_BIAS`] elsewhere.
    pub fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::from_parts(vec![self.rows, self.cols], data)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize) -> Self {
        pb.scope(name, |pb| {
            let bound = (6.0 / (input + output) as f64).sqrt();
            Self {
                weight: pb.uniform("weight", &[input, output], bound),
                bias: pb.constant("bias", Tensor::zeros(&[output])),
            }
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.param(self.weight))?.add_row(ctx.param(self.bias))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        pb.scope(name, |pb| Self {
            gain: pb.constant("gain", Tensor::ones(&[width])),
            bias: pb.constant("bias", Tensor::zeros(&[width])),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.param(self.gain), ctx.param(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Error::Config {
            component: "attention",
            field,
            reason: reason.to_string(),
        };
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return Err(bad("model_dim", "must be a positive even number"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(bad("heads", "must divide model_dim"));
        }
        if self.ffn_dim == 0 {
            return Err(bad("ffn_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize) -> Self {
        pb.scope(name, |pb| Self {
            query: Linear::new(pb, "query", d, d),
            key: Linear::new(pb, "key", d, d),
            value: Linear::new(pb, "value", d, d),
            output: Linear::new(pb, "output", d, d),
            heads,
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Var<'t>,
        keys_values: Var<'t>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(ctx, queries, keys_values, mask)?.0)
    }

    /// Attention output together with the per-head weight matrices.
    pub fn forward_with_weights<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Var<'t>,
        keys_values: Var<'t>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
        let (nq, nk) = (queries.shape()[0], keys_values.shape()[0]);
        let q = self.query.forward(ctx, queries)?;
        let k = self.key.forward(ctx, keys_values)?;
        let v = self.value.forward(ctx, keys_values)?;
        let d = q.shape()[1];
        if k.shape()[1] != d {
            return Err(Error::shape("attention", format!("query width {d} vs key width {}", k.shape()[1])));
        }
        let bias = match mask {
            Some(m) => {
                if m.rows() != nq || m.cols() != nk {
                    return Err(Error::shape(
                        "attention",
                        format!("mask {}x{} for {nq} queries and {nk} keys", m.rows(), m.cols()),
                    ));
                }
                Some(ctx.constant(m.bias()))
            }
            None => None,
        };
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.narrow(1, h * dh, dh)?, k.narrow(1, h * dh, dh)?, v.narrow(1, h * dh, dh)?)
            };
            let mut scores = qh.matmul_t(kh)?.scale(scale)?;
            if let Some(b) = bias {
                scores = scores.add(b)?;
            }
            let w = scores.softmax(1)?;
            weights.push(w.value());
            outs.push(w.matmul(vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat(&outs, 1)? };
        Ok((self.output.forward(ctx, merged)?, weights))
    }
}

/// `linear(d → 2·ffn) → GLU → linear(ffn → d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    expand: Linear,
    project: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, ffn: usize) -> Self {
        pb.scope(name, |pb| Self {
            expand: Linear::new(pb, "expand", d, 2 * ffn),
            project: Linear::new(pb, "project", ffn, d),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.expand.forward(ctx, x)?.glu()?;
        let h = ctx.dropout(h)?;
        self.project.forward(ctx, h)
    }
}

/// Pre-norm Transformer layer: an attention sublayer followed by a GLU
/// feed-forward sublayer, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &AttentionConfig) -> Self {
        pb.scope(name, |pb| Self {
            attn_norm: LayerNorm::new(pb, "attn_norm", cfg.model_dim),
            attn: MultiHeadAttention::new(pb, "attn", cfg.model_dim, cfg.heads),
            ffn_norm: LayerNorm::new(pb, "ffn_norm", cfg.model_dim),
            ffn: FeedForward::new(pb, "ffn", cfg.model_dim, cfg.ffn_dim),
        })
    }

    /// Self-attention when `keys_values` is `None`, cross-attention over
    /// `keys_values` otherwise.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Var<'t>,
        keys_values: Option<Var<'t>>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t>> {
        let h = self.attn_norm.forward(ctx, queries)?;
        let kv = keys_values.unwrap_or(h);
        let a = self.attn.forward(ctx, h, kv, mask)?;
        let x = queries.add(ctx.dropout(a)?)?;
        let f = self.ffn.forward(ctx, self.ffn_norm.forward(ctx, x)?)?;
        x.add(ctx.dropout(f)?)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }
}

/// Autoregressive decoder layer: causal self-attention, cross-attention,
/// feed-forward, all pre-norm residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &AttentionConfig) -> Self {
        pb.scope(name, |pb| Self {
            self_norm: LayerNorm::new(pb, "self_norm", cfg.model_dim),
            self_attn: MultiHeadAttention::new(pb, "self_attn", cfg.model_dim, cfg.heads),
            cross_norm: LayerNorm::new(pb, "cross_norm", cfg.model_dim),
            cross_attn: MultiHeadAttention::new(pb, "cross_attn", cfg.model_dim, cfg.heads),
            ffn_norm: LayerNorm::new(pb, "ffn_norm", cfg.model_dim),
            ffn: FeedForward::new(pb, "ffn", cfg.model_dim, cfg.ffn_dim),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let causal = AttentionMask::causal(n);
        let h = self.self_norm.forward(ctx, x)?;
        let x = x.add(self.self_attn.forward(ctx, h, h, Some(&causal))?)?;
        let h = self.cross_norm.forward(ctx, x)?;
        let x = x.add(self.cross_attn.forward(ctx, h, memory, None)?)?;
        let f = self.ffn.forward(ctx, self.ffn_norm.forward(ctx, x)?)?;
        x.add(f)
    }
}

/// Number of encoder frames left after two kernel-3, stride-2, padding-1
/// convolutions over `input_frames`.
pub fn subsampled_len(input_frames: usize) -> usize {
    conv_out_len(conv_out_len(input_frames, 3, 2, 1), 3, 2, 1)
}

pub const MIN_SUBSAMPLE_INPUT: usize = 4;

/// Two stride-2 3×3 convolutions over (time, frequency), each followed by
/// ReLU, then the frequency axis is flattened into channels and projected
/// to the model width.
#[derive(Debug, Clone)]
pub struct ConvSubsampler {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    project: Linear,
    channels: usize,
    feature_dim: usize,
}

impl ConvSubsampler {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, feature_dim: usize, channels: usize, d: usize) -> Self {
        pb.scope(name, |pb| {
            let b1 = (6.0 / (9 + 9 * channels) as f64).sqrt();
            let b2 = (6.0 / (18 * channels) as f64).sqrt();
            let conv1 = (pb.uniform("conv1.weight", &[9, channels], b1), pb.constant("conv1.bias", Tensor::zeros(&[channels])));
            let conv2 = (
                pb.uniform("conv2.weight", &[9 * channels, channels], b2),
                pb.constant("conv2.bias", Tensor::zeros(&[channels])),
            );
            let f2 = conv_out_len(conv_out_len(feature_dim, 3, 2, 1), 3, 2, 1);
            let project = Linear::new(pb, "project", f2 * channels, d);
            Self {
                conv1,
                conv2,
                project,
                channels,
                feature_dim,
            }
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, frames: Var<'t>) -> Result<Var<'t>> {
        let shape = frames.shape();
        if shape.len() != 2 || shape[1] != self.feature_dim {
            return Err(Error::shape("conv_subsample", format!("expected T'x{}, got {shape:?}", self.feature_dim)));
        }
        let t_in = shape[0];
        if t_in < MIN_SUBSAMPLE_INPUT {
            return Err(Error::InvalidArgument(format!(
                "input of {t_in} frames is too short for subsampling (need >= {MIN_SUBSAMPLE_INPUT})"
            )));
        }
        let g1 = ConvGeometry {
            height: t_in,
            width: self.feature_dim,
            channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let h = frames
            .conv2d(ctx.param(self.conv1.0), ctx.param(self.conv1.1), g1)?
            .relu()?;
        let g2 = ConvGeometry {
            height: g1.out_height(),
            width: g1.out_width(),
            channels: self.channels,
            ..g1
        };
        let h = h
            .conv2d(ctx.param(self.conv2.0), ctx.param(self.conv2.1), g2)?
            .relu()?;
        let (t, f) = (g2.out_height(), g2.out_width());
        let h = h.reshape(&[t, f * self.channels])?;
        self.project.forward(ctx, h)
    }
}

/// Adds the sinusoidal positional table to a `len × d` sequence.
pub fn add_positions<'t>(ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let pe = sinusoidal_pe(s[0], s[1])?;
    x.add(ctx.constant(pe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_gradient;
    use rand::SeedableRng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cfg(d: usize) -> AttentionConfig {
        AttentionConfig {
            model_dim: d,
            heads: 2,
            ffn_dim: 12,
            dropout: 0.0,
        }
    }

    fn layer(seed: u64, d: usize) -> (ParamStore, TransformerLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TransformerLayer::new(&mut ParamBuilder::new(&mut store, &mut rng), "l", &cfg(d));
        (store, layer)
    }

    #[test]
    fn subsampled_lengths() {
        assert_eq!(subsampled_len(16), 4);
        assert_eq!(subsampled_len(4), 1);
        let mut prev = 0;
        for t in 4..200 {
            let v = subsampled_len(t);
            assert!(v >= prev);
            let expected = ((t - 1) / 2 + 1 - 1) / 2 + 1;
            assert_eq!(v, expected);
            prev = v;
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8).validate().is_ok());
        assert!(AttentionConfig { heads: 3, ..cfg(8) }.validate().is_err());
        assert!(AttentionConfig { dropout: 1.0, ..cfg(8) }.validate().is_err());
    }

    #[test]
    fn mask_rejects_empty_row() {
        assert!(matches!(
            AttentionMask::new(2, 2, vec![true, false, false, false]),
            Err(Error::EmptyMaskRow { row: 1 })
        ));
        let c = AttentionMask::causal(3);
        assert!(c.get(0, 0) && !c.get(0, 1) && c.get(2, 1));
    }

    #[test]
    fn all_true_mask_equals_no_mask() {
        let (store, layer) = layer(1, 8);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let q = ctx.constant(random(&[3, 8], 2));
        let kv = ctx.constant(random(&[5, 8], 3));
        let a = layer.forward(&ctx, q, Some(kv), None).unwrap().value();
        let b = layer
            .forward(&ctx, q, Some(kv), Some(&AttentionMask::all_true(3, 5)))
            .unwrap()
            .value();
        assert_eq!(a, b);
    }

    #[test]
    fn single_allowed_key_returns_its_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 2);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let q = ctx.constant(random(&[1, 8], 5));
        let kv = ctx.constant(random(&[4, 8], 6));
        let mask = AttentionMask::new(1, 4, vec![false, false, true, false]).unwrap();
        let (out, weights) = attn.forward_with_weights(&ctx, q, kv, Some(&mask)).unwrap();
        for w in &weights {
            assert_eq!(w.data()[2], 1.0);
            assert!(w.data()[0] < 1e-300 && w.data()[1] < 1e-300 && w.data()[3] < 1e-300);
        }
        let v = attn.value.forward(&ctx, kv.narrow(0, 2, 1).unwrap()).unwrap();
        let expected = attn.output.forward(&ctx, v).unwrap().value();
        for (a, b) in out.value().data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_distributions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 4);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let q = ctx.constant(random(&[3, 8], 8));
        let kv = ctx.constant(random(&[6, 8], 9));
        let allowed: Vec<bool> = (0..18).map(|i| i % 6 <= i / 6 + 1).collect();
        let mask = AttentionMask::new(3, 6, allowed).unwrap();
        let (_, weights) = attn.forward_with_weights(&ctx, q, kv, Some(&mask)).unwrap();
        for w in weights {
            for r in 0..3 {
                let row = w.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (c, &p) in row.iter().enumerate() {
                    if !mask.get(r, c) {
                        assert!(p < 1e-300);
                    }
                }
            }
        }
    }

    #[test]
    fn key_permutation_invariance() {
        let (store, layer) = layer(10, 8);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let q = ctx.constant(random(&[3, 8], 11));
        let kv_t = random(&[5, 8], 12);
        let allowed: Vec<bool> = (0..15).map(|i| (i * 7) % 3 != 0 || i % 5 == 0).collect();
        let mask = AttentionMask::new(3, 5, allowed.clone()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let kv_p = Tensor::from_rows(&perm.iter().map(|&p| kv_t.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let allowed_p: Vec<bool> = (0..3).flat_map(|r| perm.iter().map(move |&p| (r, p))).map(|(r, p)| allowed[r * 5 + p]).collect();
        let mask_p = AttentionMask::new(3, 5, allowed_p).unwrap();
        let a = layer.forward(&ctx, q, Some(ctx.constant(kv_t)), Some(&mask)).unwrap().value();
        let b = layer.forward(&ctx, q, Some(ctx.constant(kv_p)), Some(&mask_p)).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_layer_gradient() {
        let (store, layer) = layer(13, 8);
        let kv = random(&[4, 8], 14);
        let mask = AttentionMask::new(3, 4, vec![true, false, false, false, true, true, false, false, true, true, true, true]).unwrap();
        let w = random(&[3, 8], 15);
        let err = check_gradient(
            |t, x| {
                let ctx = Ctx::inference(t, &store);
                let out = layer.forward(&ctx, x, Some(ctx.constant(kv.clone())), Some(&mask))?;
                let out = layer.forward(&ctx, out, None, None)?;
                out.mul(ctx.constant(w.clone()))?.sum()
            },
            &random(&[3, 8], 16),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn parameter_gradient_through_layer() {
        let (store, layer) = layer(17, 8);
        let x = random(&[3, 8], 18);
        let w = random(&[3, 8], 19);
        let id = store.find("l.attn.query.weight").unwrap();
        let target = store.get(id).as_ref().clone();
        let err = check_gradient(
            |t, p| {
                let ctx = Ctx::inference(t, &store);
                ctx.substitute(id, p);
                layer.forward(&ctx, ctx.constant(x.clone()), None, None)?.mul(ctx.constant(w.clone()))?.sum()
            },
            &target,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_subsampler_shapes_and_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let sub = ConvSubsampler::new(&mut ParamBuilder::new(&mut store, &mut rng), "sub", 6, 3, 8);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let out = sub.forward(&ctx, ctx.constant(random(&[16, 6], 21))).unwrap();
        assert_eq!(out.shape(), vec![4, 8]);
        assert!(sub.forward(&ctx, ctx.constant(random(&[3, 6], 22))).is_err());
        let w = random(&[3, 8], 23);
        let err = check_gradient(
            |t, x| {
                let ctx = Ctx::inference(t, &store);
                sub.forward(&ctx, x)?.mul(ctx.constant(w.clone()))?.sum()
            },
            &random(&[11, 6], 24),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
