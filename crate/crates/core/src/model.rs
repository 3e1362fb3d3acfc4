//! The LA-NAT network: acoustic encoder with a CTC head, a speech-text
//! shared encoder with memory slots, and a speech-text shared decoder that
//! emits every output token in one parallel pass. An autoregressive
//! baseline decoder lives in [`ArBaseline`] for latency comparisons.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Tape, Var};
use crate::ctc::{self, AlignmentPath};
use crate::error::{Error, Result};
use crate::nn::{
    add_positions, AttentionConfig, AttentionMask, ConvSubsampler, Ctx, DecoderLayer, LayerNorm, Linear,
    ParamBuilder, ParamId, ParamStore, TransformerLayer, MIN_SUBSAMPLE_INPUT,
};
use crate::tensor::{sinusoidal_pe, Tensor};

/// Name of the token embedding table (frozen during Stage 2).
pub const TOKEN_EMBEDDING: &str = "text.embedding";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaNatConfig {
    /// Acoustic encoder Transformer layers (N_a).
    pub acoustic_layers: usize,
    /// Shared encoder self-attention layers (N_b).
    pub shared_layers: usize,
    /// Memory cross-attention layers after the first one (N_c).
    pub memory_layers: usize,
    /// Decoder cross-attention layers (N_d).
    pub decoder_cross_layers: usize,
    /// Decoder self-attention refinement layers (N_e).
    pub decoder_refine_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_channels: usize,
    pub memory_slots: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub temperature: f64,
    pub lookahead: usize,
    pub dropout: f64,
    /// Learn the decoder query table instead of using fixed sinusoids.
    pub trainable_queries: bool,
    /// Longest output the trainable query table supports.
    pub max_output_len: usize,
}

impl Default for LaNatConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LaNatConfig {
    /// Small default used for training on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            acoustic_layers: 2,
            shared_layers: 2,
            memory_layers: 2,
            decoder_cross_layers: 1,
            decoder_refine_layers: 1,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            conv_channels: 32,
            memory_slots: 8,
            vocab_size: 16,
            feature_dim: 20,
            temperature: 0.1,
            lookahead: 1,
            dropout: 0.1,
            trainable_queries: false,
            max_output_len: 64,
        }
    }

    /// Full-size "base" dimensions: {6,6,5,2,4} layers, d=256, 8 heads,
    /// feed-forward 2048, 256 convolution filters.
    pub fn base_paper() -> Self {
        Self {
            acoustic_layers: 6,
            shared_layers: 6,
            memory_layers: 5,
            decoder_cross_layers: 2,
            decoder_refine_layers: 4,
            model_dim: 256,
            heads: 8,
            ffn_dim: 2048,
            conv_channels: 256,
            ..Self::desk()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn toy() -> Self {
        Self {
            acoustic_layers: 1,
            shared_layers: 1,
            memory_layers: 1,
            decoder_cross_layers: 1,
            decoder_refine_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 8,
            conv_channels: 2,
            memory_slots: 3,
            vocab_size: 4,
            feature_dim: 6,
            dropout: 0.0,
            ..Self::desk()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Error::Config {
            component: "model",
            field,
            reason: reason.to_string(),
        };
        let counts = [
            ("acoustic_layers", self.acoustic_layers),
            ("shared_layers", self.shared_layers),
            ("memory_layers", self.memory_layers),
            ("decoder_cross_layers", self.decoder_cross_layers),
            ("decoder_refine_layers", self.decoder_refine_layers),
            ("memory_slots", self.memory_slots),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("conv_channels", self.conv_channels),
            ("max_output_len", self.max_output_len),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(bad(field, "must be >= 1"));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(bad("temperature", "must be > 0"));
        }
        self.attention().validate()
    }
}

/// Counts of forward passes through the two halves of the network.
#[derive(Debug, Default)]
pub struct PassCounter {
    acoustic: AtomicUsize,
    decoder: AtomicUsize,
}

impl PassCounter {
    pub fn acoustic(&self) -> usize {
        self.acoustic.load(Ordering::Relaxed)
    }

    pub fn decoder(&self) -> usize {
        self.decoder.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.acoustic.store(0, Ordering::Relaxed);
        self.decoder.store(0, Ordering::Relaxed);
    }
}

pub struct SpeechForwardOutput<'t> {
    pub ctc_log_probs: Var<'t>,
    pub asr_logits: Var<'t>,
    /// H_com^O, `M × d`.
    pub composite: Var<'t>,
    /// H_se^O, `T × d`.
    pub fine: Var<'t>,
    pub alignment: AlignmentPath,
}

pub struct TextForwardOutput<'t> {
    pub recon_logits: Var<'t>,
    /// H_com^Y, `M × d`.
    pub composite: Var<'t>,
    /// H_se^Y, `L × d`.
    pub fine: Var<'t>,
}

pub struct LaNat {
    config: LaNatConfig,
    params: ParamStore,
    subsampler: ConvSubsampler,
    acoustic: Vec<TransformerLayer>,
    ctc_norm: LayerNorm,
    ctc_out: Linear,
    embedding: ParamId,
    shared: Vec<TransformerLayer>,
    shared_norm: LayerNorm,
    memory: ParamId,
    memory_layers: Vec<TransformerLayer>,
    decoder_cross: Vec<TransformerLayer>,
    decoder_refine: Vec<TransformerLayer>,
    decoder_norm: LayerNorm,
    decoder_out: Linear,
    queries: Option<ParamId>,
    passes: PassCounter,
}

impl Clone for LaNat {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            subsampler: self.subsampler.clone(),
            acoustic: self.acoustic.clone(),
            ctc_norm: self.ctc_norm.clone(),
            ctc_out: self.ctc_out.clone(),
            embedding: self.embedding,
            shared: self.shared.clone(),
            shared_norm: self.shared_norm.clone(),
            memory: self.memory,
            memory_layers: self.memory_layers.clone(),
            decoder_cross: self.decoder_cross.clone(),
            decoder_refine: self.decoder_refine.clone(),
            decoder_norm: self.decoder_norm.clone(),
            decoder_out: self.decoder_out.clone(),
            queries: self.queries,
            passes: PassCounter::default(),
        }
    }
}

impl LaNat {
    pub fn new(config: LaNatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let att = config.attention();
        let d = config.model_dim;

        let (subsampler, acoustic, ctc_norm, ctc_out) = pb.scope("acoustic", |pb| {
            let sub = ConvSubsampler::new(pb, "subsample", config.feature_dim, config.conv_channels, d);
            let layers = (0..config.acoustic_layers)
                .map(|i| TransformerLayer::new(pb, &format!("layer{i}"), &att))
                .collect();
            let norm = LayerNorm::new(pb, "ctc_norm", d);
            let out = Linear::new(pb, "ctc_out", d, config.vocab_size + 1);
            (sub, layers, norm, out)
        });
        let embedding = pb.scope("text", |pb| pb.normal("embedding", &[config.vocab_size, d], 1.0));
        let (shared, shared_norm, memory, memory_layers) = pb.scope("shared_encoder", |pb| {
            let layers = (0..config.shared_layers)
                .map(|i| TransformerLayer::new(pb, &format!("layer{i}"), &att))
                .collect();
            let norm = LayerNorm::new(pb, "norm", d);
            let memory = pb.normal("memory_slots", &[config.memory_slots, d], 1.0);
            let mem_layers = (0..=config.memory_layers)
                .map(|i| TransformerLayer::new(pb, &format!("memory{i}"), &att))
                .collect();
            (layers, norm, memory, mem_layers)
        });
        let (decoder_cross, decoder_refine, decoder_norm, decoder_out, queries) = pb.scope("shared_decoder", |pb| {
            let cross = (0..config.decoder_cross_layers)
                .map(|i| TransformerLayer::new(pb, &format!("cross{i}"), &att))
                .collect();
            let refine = (0..config.decoder_refine_layers)
                .map(|i| TransformerLayer::new(pb, &format!("refine{i}"), &att))
                .collect();
            let norm = LayerNorm::new(pb, "norm", d);
            let out = Linear::new(pb, "out", d, config.vocab_size);
            let queries = config.trainable_queries.then(|| {
                pb.constant("queries", sinusoidal_pe(config.max_output_len, d).expect("validated width"))
            });
            (cross, refine, norm, out, queries)
        });

        Ok(Self {
            config,
            params,
            subsampler,
            acoustic,
            ctc_norm,
            ctc_out,
            embedding,
            shared,
            shared_norm,
            memory,
            memory_layers,
            decoder_cross,
            decoder_refine,
            decoder_norm,
            decoder_out,
            queries,
            passes: PassCounter::default(),
        })
    }

    pub fn config(&self) -> &LaNatConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn memory_id(&self) -> ParamId {
        self.memory
    }

    /// Parameters read by the shared encoder and decoder (used by both the
    /// speech and the text path).
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.starts_with("shared_encoder.") || n.starts_with("shared_decoder.")
            })
            .collect()
    }

    /// Acoustic features H^O (`T × d`) and CTC log-posteriors
    /// (`T × (V+1)`, blank at column 0).
    pub fn acoustic_encode<'t>(&self, ctx: &Ctx<'t>, frames: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
        if frames.rank() != 2 || frames.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "acoustic_encode",
                format!("expected T' x {}, got {:?}", self.config.feature_dim, frames.shape()),
            ));
        }
        if frames.rows() < MIN_SUBSAMPLE_INPUT {
            return Err(Error::InvalidArgument(format!(
                "utterance of {} frames is too short (need >= {MIN_SUBSAMPLE_INPUT})",
                frames.rows()
            )));
        }
        self.passes.acoustic.fetch_add(1, Ordering::Relaxed);
        let x = self.subsampler.forward(ctx, ctx.constant(frames.clone()))?;
        let mut h = add_positions(ctx, x)?;
        for layer in &self.acoustic {
            h = layer.forward(ctx, h, None, None)?;
        }
        let logits = self.ctc_out.forward(ctx, self.ctc_norm.forward(ctx, h)?)?;
        Ok((h, logits.log_softmax(1)?))
    }

    /// Token embeddings plus sinusoidal positions, H^Y (`L × d`).
    pub fn text_embed<'t>(&self, ctx: &Ctx<'t>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let e = ctx.param(self.embedding).embedding_lookup(tokens)?;
        add_positions(ctx, e)
    }

    /// Returns (H_se, H_com): the layer-normalized output of the shared
    /// self-attention stack, and the `M × d` memory-slot summary of it.
    pub fn shared_encode<'t>(&self, ctx: &Ctx<'t>, features: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut x = features;
        for layer in &self.shared {
            x = layer.forward(ctx, x, None, None)?;
        }
        let fine = self.shared_norm.forward(ctx, x)?;
        let mut slots = ctx.param(self.memory);
        for layer in &self.memory_layers {
            slots = layer.forward(ctx, slots, Some(fine), None)?;
        }
        Ok((fine, slots))
    }

    fn decoder_queries<'t>(&self, ctx: &Ctx<'t>, len: usize) -> Result<Var<'t>> {
        match self.queries {
            Some(id) => {
                if len > self.config.max_output_len {
                    return Err(Error::InvalidArgument(format!(
                        "output length {len} exceeds the query table ({})",
                        self.config.max_output_len
                    )));
                }
                ctx.param(id).narrow(0, 0, len)
            }
            None => Ok(ctx.constant(sinusoidal_pe(len, self.config.model_dim)?)),
        }
    }

    /// Parallel decoder: positional queries attend `[fine; composite]`
    /// under `mask`, then self-attention refinement, then `L × V` logits.
    pub fn shared_decode<'t>(
        &self,
        ctx: &Ctx<'t>,
        fine: Var<'t>,
        composite: Var<'t>,
        len: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t>> {
        if len == 0 {
            return Err(Error::InvalidArgument("decoder output length must be >= 1".into()));
        }
        self.passes.decoder.fetch_add(1, Ordering::Relaxed);
        let context = concat(&[fine, composite], 0)?;
        let mut q = self.decoder_queries(ctx, len)?;
        for layer in &self.decoder_cross {
            q = layer.forward(ctx, q, Some(context), mask)?;
        }
        for layer in &self.decoder_refine {
            q = layer.forward(ctx, q, None, None)?;
        }
        self.decoder_out.forward(ctx, self.decoder_norm.forward(ctx, q)?)
    }

    fn fusion_mask(&self, path: &AlignmentPath, frames: usize) -> Result<AttentionMask> {
        let trigger = ctc::build_trigger_mask(path, frames, self.config.lookahead)?;
        ctc::build_fusion_mask(trigger, self.config.memory_slots).to_attention_mask()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Teacher-forced speech pass: the fusion mask comes from aligning the
    /// current CTC posterior against `tokens`, and the decoder emits exactly
    /// `tokens.len()` rows.
    pub fn forward_speech<'t>(&self, ctx: &Ctx<'t>, frames: &Tensor, tokens: &[usize]) -> Result<SpeechForwardOutput<'t>> {
        self.check_tokens(tokens)?;
        let (h, log_probs) = self.acoustic_encode(ctx, frames)?;
        let lp = log_probs.value();
        let alignment = ctc::ctc_forced_align(&lp, tokens)?;
        let (fine, composite) = self.shared_encode(ctx, h)?;
        let mask = self.fusion_mask(&alignment, lp.rows())?;
        let asr_logits = self.shared_decode(ctx, fine, composite, tokens.len(), Some(&mask))?;
        Ok(SpeechForwardOutput {
            ctc_log_probs: log_probs,
            asr_logits,
            composite,
            fine,
            alignment,
        })
    }

    /// Reconstruction pass over text; the decoder sees all of `[H_se^Y; H_com^Y]`.
    pub fn forward_text<'t>(&self, ctx: &Ctx<'t>, tokens: &[usize]) -> Result<TextForwardOutput<'t>> {
        self.check_tokens(tokens)?;
        let h = self.text_embed(ctx, tokens)?;
        let (fine, composite) = self.shared_encode(ctx, h)?;
        let recon_logits = self.shared_decode(ctx, fine, composite, tokens.len(), None)?;
        Ok(TextForwardOutput {
            recon_logits,
            composite,
            fine,
        })
    }

    /// Non-autoregressive recognition: one acoustic pass decides the length
    /// and the fusion mask, one decoder pass emits every token.
    pub fn decode_nar(&self, frames: &Tensor) -> Result<Vec<usize>> {
        self.decode_nar_inner(frames, None)
    }

    /// Same work as [`LaNat::decode_nar`], except the decoder length and mask
    /// come from `hypothesis` rather than from the greedy CTC output. Used
    /// by the latency benchmark to pin the output length on untrained models.
    pub fn decode_nar_with_hypothesis(&self, frames: &Tensor, hypothesis: &[usize]) -> Result<Vec<usize>> {
        self.decode_nar_inner(frames, Some(hypothesis))
    }

    fn decode_nar_inner(&self, frames: &Tensor, forced: Option<&[usize]>) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        let (h, log_probs) = self.acoustic_encode(&ctx, frames)?;
        let lp = log_probs.value();
        let greedy = ctc::ctc_greedy_decode(&lp);
        let hypothesis = forced.map_or(greedy, <[usize]>::to_vec);
        if hypothesis.is_empty() {
            return Ok(Vec::new());
        }
        let path = ctc::ctc_forced_align(&lp, &hypothesis)?;
        let (fine, composite) = self.shared_encode(&ctx, h)?;
        let mask = self.fusion_mask(&path, lp.rows())?;
        let logits = self.shared_decode(&ctx, fine, composite, hypothesis.len(), Some(&mask))?;
        Ok(logits.value().argmax_rows())
    }

    /// Greedy CTC transcript, without the decoder.
    pub fn decode_ctc(&self, frames: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        let (_, log_probs) = self.acoustic_encode(&ctx, frames)?;
        Ok(ctc::ctc_greedy_decode(&log_probs.value()))
    }

    /// CTC log-posteriors for `frames`.
    pub fn ctc_posterior(&self, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        let (_, log_probs) = self.acoustic_encode(&ctx, frames)?;
        Ok(log_probs.value().as_ref().clone())
    }

    /// Viterbi alignment of `tokens` against the model's CTC posterior.
    pub fn align(&self, frames: &Tensor, tokens: &[usize]) -> Result<AlignmentPath> {
        ctc::ctc_forced_align(&self.ctc_posterior(frames)?, tokens)
    }
}

/// Classic left-to-right Transformer decoder over H^O, kept only to measure
/// how much the parallel decoder saves. It owns its parameters and borrows
/// the acoustic encoder of a [`LaNat`].
pub struct ArBaseline {
    params: ParamStore,
    embedding: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    out: Linear,
    vocab_size: usize,
    model_dim: usize,
}

impl ArBaseline {
    /// `layers` decoder layers sized like `config`. The vocabulary gains an
    /// end-of-sentence token (`vocab_size`) and a start token (`vocab_size + 1`).
    pub fn new(config: &LaNatConfig, layers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let att = AttentionConfig { dropout: 0.0, ..config.attention() };
        let d = config.model_dim;
        let (embedding, layers, norm, out) = pb.scope("ar_decoder", |pb| {
            let emb = pb.normal("embedding", &[config.vocab_size + 2, d], 1.0);
            let layers = (0..layers).map(|i| DecoderLayer::new(pb, &format!("layer{i}"), &att)).collect();
            let norm = LayerNorm::new(pb, "norm", d);
            let out = Linear::new(pb, "out", d, config.vocab_size + 1);
            (emb, layers, norm, out)
        });
        Ok(Self {
            params,
            embedding,
            layers,
            norm,
            out,
            vocab_size: config.vocab_size,
            model_dim: d,
        })
    }

    pub fn eos(&self) -> usize {
        self.vocab_size
    }

    pub fn bos(&self) -> usize {
        self.vocab_size + 1
    }

    /// Logits (`len × (V+1)`) for every prefix position of `inputs`, which
    /// starts with the start token.
    pub fn step_logits(&self, memory: &Arc<Tensor>, inputs: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        let mem = tape.leaf_shared(Arc::clone(memory), false);
        let emb = ctx.param(self.embedding).embedding_lookup(inputs)?;
        let mut x = emb.add(ctx.constant(sinusoidal_pe(inputs.len(), self.model_dim)?))?;
        for layer in &self.layers {
            x = layer.forward(&ctx, x, mem)?;
        }
        let logits = self.out.forward(&ctx, self.norm.forward(&ctx, x)?)?;
        Ok(logits.value().as_ref().clone())
    }

    /// Greedy token-by-token decoding until end-of-sentence or `max_len`.
    pub fn decode(&self, model: &LaNat, frames: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        self.decode_inner(model, frames, max_len, true)
    }

    /// Greedy decoding of exactly `len` tokens (end-of-sentence suppressed).
    pub fn decode_fixed(&self, model: &LaNat, frames: &Tensor, len: usize) -> Result<Vec<usize>> {
        self.decode_inner(model, frames, len, false)
    }

    fn decode_inner(&self, model: &LaNat, frames: &Tensor, max_len: usize, stop_at_eos: bool) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        let memory = {
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, model.params());
            let (h, _) = model.acoustic_encode(&ctx, frames)?;
            h.value()
        };
        let mut inputs = vec![self.bos()];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.step_logits(&memory, &inputs)?;
            let row = logits.row(logits.rows() - 1);
            let limit = if stop_at_eos { row.len() } else { self.vocab_size };
            let next = (0..limit).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            if next == self.eos() {
                break;
            }
            out.push(next);
            inputs.push(next);
        }
        Ok(out)
    }
}
