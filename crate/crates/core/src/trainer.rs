//! Staged training: text pre-training of the shared modules, speech
//! training with a frozen embedding, and joint speech-text training with
//! the contrastive objective. Adam with a warmup schedule, NaN abort, and
//! checkpoint averaging over the final epochs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::ctc::ctc_loss;
use crate::data::{batch_iter, Utterance};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, contrastive_loss, cross_entropy_tokens, LossParts, LossWeights};
use crate::model::{LaNat, TOKEN_EMBEDDING};
use crate::nn::Ctx;
use crate::tensor::Tensor;

pub const LOSS_NAMES: [&str; 5] = ["ctc", "contrastive", "ce_text", "ce_speech", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    TextOnly,
    SpeechOnly,
    SpeechText,
}

/// One training stage: which data, which losses, what stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub label: String,
    pub data: DataMode,
    pub weights: LossWeights,
    /// Parameter names that must not change during the stage.
    pub frozen: Vec<String>,
    pub epochs: usize,
}

impl StagePlan {
    /// Text reconstruction only.
    pub fn text_pretrain(epochs: usize) -> Self {
        Self {
            stage: 1,
            label: "stage1".into(),
            data: DataMode::TextOnly,
            weights: LossWeights::TEXT_PRETRAIN,
            frozen: Vec::new(),
            epochs,
        }
    }

    /// Speech recognition with the token embedding table frozen.
    pub fn speech(epochs: usize) -> Self {
        Self {
            stage: 2,
            label: "stage2".into(),
            data: DataMode::SpeechOnly,
            weights: LossWeights::SPEECH,
            frozen: vec![TOKEN_EMBEDDING.into()],
            epochs,
        }
    }

    /// All four losses on paired speech and text.
    pub fn joint(epochs: usize) -> Self {
        Self {
            stage: 3,
            label: "stage3".into(),
            data: DataMode::SpeechText,
            weights: LossWeights::JOINT,
            frozen: Vec::new(),
            epochs,
        }
    }

    /// Speech-only losses with nothing frozen and no pre-training.
    pub fn scratch(epochs: usize) -> Self {
        Self {
            frozen: Vec::new(),
            label: "scratch".into(),
            ..Self::speech(epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |reason: &str| Error::Config {
            component: "trainer",
            field: "stage",
            reason: format!("{}: {reason}", self.label),
        };
        match self.data {
            DataMode::TextOnly if self.weights.uses_speech() => Err(bad("text-only stage has speech losses")),
            DataMode::SpeechOnly if self.weights.uses_text() => Err(bad("speech-only stage has text losses")),
            _ if self.weights == LossWeights { ctc: 0.0, contrastive: 0.0, ce_text: 0.0, ce_speech: 0.0 } => {
                Err(bad("all loss weights are zero"))
            }
            _ => Ok(()),
        }
    }
}

/// Which stages run, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Scratch,
    Step3,
    Steps13,
    Steps123,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Scratch, Recipe::Step3, Recipe::Steps13, Recipe::Steps123];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Scratch => "scratch",
            Recipe::Step3 => "step3",
            Recipe::Steps13 => "steps13",
            Recipe::Steps123 => "steps123",
        }
    }

    /// Row label in the ablation table.
    pub fn description(self) -> &'static str {
        match self {
            Recipe::Scratch => "From scratch",
            Recipe::Step3 => "Step 3",
            Recipe::Steps13 => "Steps 1+3",
            Recipe::Steps123 => "Steps 1+2+3",
        }
    }

    pub fn stages(self, cfg: &TrainConfig) -> Vec<StagePlan> {
        match self {
            Recipe::Scratch => vec![StagePlan::scratch(cfg.speech_epochs)],
            Recipe::Step3 => vec![StagePlan::joint(cfg.joint_epochs)],
            Recipe::Steps13 => vec![StagePlan::text_pretrain(cfg.text_epochs), StagePlan::joint(cfg.joint_epochs)],
            Recipe::Steps123 => vec![
                StagePlan::text_pretrain(cfg.text_epochs),
                StagePlan::speech(cfg.speech_epochs),
                StagePlan::joint(cfg.joint_epochs),
            ],
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown recipe {s:?} (expected scratch, step3, steps13 or steps123)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub text_epochs: usize,
    pub speech_epochs: usize,
    pub joint_epochs: usize,
    /// Input frames per speech batch.
    pub batch_frames: usize,
    /// Tokens per text-only batch.
    pub batch_tokens: usize,
    /// Batches whose gradients are summed before one optimizer step.
    pub accumulation_steps: usize,
    pub peak_learning_rate: f64,
    pub warmup_steps: usize,
    /// Average the parameters of this many final epochs of the last stage.
    pub average_last: usize,
    /// Add text-only batches from the auxiliary corpus during joint training.
    pub joint_extra_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            text_epochs: 200,
            speech_epochs: 100,
            joint_epochs: 100,
            batch_frames: 800,
            batch_tokens: 80,
            accumulation_steps: 1,
            peak_learning_rate: 2e-3,
            warmup_steps: 300,
            average_last: 3,
            joint_extra_text: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Error::Config {
            component: "trainer",
            field,
            reason: reason.into(),
        };
        if self.batch_frames == 0 {
            return Err(bad("batch_frames", "must be >= 1"));
        }
        if self.batch_tokens == 0 {
            return Err(bad("batch_tokens", "must be >= 1"));
        }
        if self.accumulation_steps == 0 {
            return Err(bad("accumulation_steps", "must be >= 1"));
        }
        if !(self.peak_learning_rate > 0.0) || !self.peak_learning_rate.is_finite() {
            return Err(bad("peak_learning_rate", "must be > 0"));
        }
        if self.warmup_steps == 0 {
            return Err(bad("warmup_steps", "must be >= 1"));
        }
        if self.average_last == 0 {
            return Err(bad("average_last", "must be >= 1"));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then inverse square-root decay.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak_learning_rate * (s / w).min((w / s).sqrt())
    }
}

/// Adam with β = (0.9, 0.98) and ε = 1e-9.
#[derive(Debug, Clone)]
pub struct Adam {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.98;
    pub const EPSILON: f64 = 1e-9;

    pub fn new(model: &LaNat) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update; parameters whose gradient is `None` are untouched.
    pub fn update(&mut self, model: &mut LaNat, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        let ids: Vec<_> = model.params().ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = model.params_mut().get_mut(id);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPSILON);
            }
        }
    }
}

/// One training example as seen by a stage.
#[derive(Debug, Clone, Copy)]
pub enum Example<'a> {
    Text(&'a [usize]),
    Speech(&'a Utterance),
}

/// Summed gradients and loss statistics of a group of examples.
#[derive(Debug, Clone)]
pub struct GradientSum {
    pub grads: Vec<Option<Tensor>>,
    /// Per loss name (see [`LOSS_NAMES`]): sum of values and count.
    pub loss_sums: [(f64, usize); 5],
    pub examples: usize,
}

impl GradientSum {
    fn empty(params: usize) -> Self {
        Self {
            grads: vec![None; params],
            loss_sums: [(0.0, 0); 5],
            examples: 0,
        }
    }

    fn absorb(&mut self, grads: Vec<Option<Tensor>>) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => *acc = Some(g),
            }
        }
    }

    /// Adds `other` after `self`, preserving summation order.
    pub fn merge(&mut self, other: GradientSum) {
        self.absorb(other.grads);
        for (a, b) in self.loss_sums.iter_mut().zip(other.loss_sums) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.examples += other.examples;
    }
}

/// Builds the composite loss of one example on `ctx`.
pub fn example_loss<'t>(
    model: &LaNat,
    ctx: &Ctx<'t>,
    example: Example<'_>,
    weights: &LossWeights,
) -> Result<(crate::autograd::Var<'t>, [Option<f64>; 4])> {
    let mut parts = LossParts::default();
    match example {
        Example::Text(tokens) => {
            let out = model.forward_text(ctx, tokens)?;
            parts.ce_text = Some(cross_entropy_tokens(out.recon_logits, tokens)?);
        }
        Example::Speech(u) => {
            let speech = model.forward_speech(ctx, &u.frames, &u.tokens)?;
            parts.ctc = Some(ctc_loss(speech.ctc_log_probs, &u.tokens)?);
            parts.ce_speech = Some(cross_entropy_tokens(speech.asr_logits, &u.tokens)?);
            if weights.uses_text() {
                let text = model.forward_text(ctx, &u.tokens)?;
                parts.ce_text = Some(cross_entropy_tokens(text.recon_logits, &u.tokens)?);
                parts.contrastive = Some(contrastive_loss(speech.composite, text.composite, model.config().temperature)?);
            }
        }
    }
    let total = composite_loss(ctx.tape(), &parts, weights)?;
    Ok((total, parts.values()))
}

/// Sums per-example gradients in the given order. Each example gets its
/// own tape and a dropout stream drawn from `rng`.
pub fn accumulate_gradients(
    model: &LaNat,
    examples: &[Example<'_>],
    weights: &LossWeights,
    trainable: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<GradientSum> {
    let mut sum = GradientSum::empty(model.params().len());
    for &example in examples {
        let tape = Tape::new();
        let ctx = Ctx::training(
            &tape,
            model.params(),
            trainable.to_vec(),
            model.config().dropout,
            Some(ChaCha8Rng::seed_from_u64(rng.gen())),
        );
        let (loss, parts) = example_loss(model, &ctx, example, weights)?;
        let total = loss.value().item();
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let mut grads = tape.backward(loss)?;
        sum.absorb(ctx.param_grads(&mut grads));
        for (slot, v) in sum.loss_sums.iter_mut().zip(parts.into_iter().chain([Some(total)])) {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 += 1;
            }
        }
        sum.examples += 1;
    }
    Ok(sum)
}

/// One row of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: &'static str,
    pub value: f64,
}

/// Renders a loss curve as CSV with header `stage,epoch,loss_name,value`.
pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("stage,epoch,loss_name,value\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.stage, r.epoch, r.loss, r.value));
    }
    out
}

/// Data available to a stage.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub speech: &'a [Utterance],
    /// Text-only sentences (stage-1 data and optional joint extras).
    pub text: &'a [Vec<usize>],
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub curve: Vec<LossRecord>,
    /// Parameter snapshots after each of the final epochs (oldest first).
    pub snapshots: Vec<Vec<Tensor>>,
    pub steps: usize,
}

fn snapshot(model: &LaNat) -> Vec<Tensor> {
    model.params().iter().map(|p| p.value.as_ref().clone()).collect()
}

/// Runs `plan.epochs` epochs of Adam updates. On a non-finite loss or
/// parameter the model is restored to its state before the failing step
/// and [`Error::Diverged`] is returned.
pub fn train_stage(
    model: &mut LaNat,
    plan: &StagePlan,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageReport> {
    plan.validate()?;
    cfg.validate()?;
    let mut trainable = vec![true; model.params().len()];
    let mut frozen_before = Vec::new();
    for name in &plan.frozen {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("frozen parameter {name} does not exist")))?;
        trainable[id.index()] = false;
        frozen_before.push((id, model.params().get(id).clone()));
    }

    let mut units: Vec<(Example<'_>, usize)> = Vec::new();
    let mut text_units: Vec<(Example<'_>, usize)> = Vec::new();
    match plan.data {
        DataMode::TextOnly => text_units.extend(data.text.iter().map(|t| (Example::Text(t), t.len()))),
        DataMode::SpeechOnly | DataMode::SpeechText => {
            units.extend(data.speech.iter().map(|u| (Example::Speech(u), u.num_frames())));
            if plan.data == DataMode::SpeechText && cfg.joint_extra_text {
                text_units.extend(data.text.iter().map(|t| (Example::Text(t), t.len())));
            }
        }
    }
    if units.is_empty() && text_units.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no training data", plan.label)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(plan.stage));
    let mut adam = Adam::new(model);
    let mut curve = Vec::new();
    let mut snapshots = Vec::new();
    let keep_from = plan.epochs.saturating_sub(cfg.average_last);

    for epoch in 0..plan.epochs {
        let mut batches: Vec<Vec<Example<'_>>> = Vec::new();
        for (group, budget) in [(&units, cfg.batch_frames), (&text_units, cfg.batch_tokens)] {
            if group.is_empty() {
                continue;
            }
            let sizes: Vec<usize> = group.iter().map(|u| u.1).collect();
            for b in batch_iter(&sizes, budget, rng.gen(), epoch as u64)? {
                batches.push(b.into_iter().map(|i| group[i].0).collect());
            }
        }
        if !units.is_empty() && !text_units.is_empty() {
            // interleave speech and text batches deterministically
            let mut order: Vec<usize> = (0..batches.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            batches = order.into_iter().map(|i| std::mem::take(&mut batches[i])).collect();
        }

        let mut epoch_sum = GradientSum::empty(model.params().len());
        for (step_in_epoch, group) in batches.chunks(cfg.accumulation_steps).enumerate() {
            let examples: Vec<Example<'_>> = group.iter().flatten().copied().collect();
            let step = adam.step_count() + 1;
            let diverged = |detail: String| Error::Diverged {
                stage: plan.stage,
                epoch,
                step,
                detail,
            };
            let mut sum = match accumulate_gradients(model, &examples, &plan.weights, &trainable, &mut rng) {
                Ok(s) => s,
                Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            let n = sum.examples as f64;
            for g in sum.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            let before = snapshot(model);
            let lr = cfg.learning_rate(step);
            adam.update(model, &sum.grads, lr);
            if model.params().iter().any(|p| !p.value.all_finite()) {
                model.params_mut().assign(before)?;
                return Err(diverged(format!("non-finite parameters after step {step_in_epoch} of the epoch")));
            }
            sum.grads = vec![None; sum.grads.len()];
            epoch_sum.merge(sum);
        }

        for (name, (total, count)) in LOSS_NAMES.iter().zip(epoch_sum.loss_sums) {
            if count > 0 {
                curve.push(LossRecord {
                    stage: plan.stage,
                    epoch,
                    loss: name,
                    value: total / count as f64,
                });
            }
        }
        if epoch >= keep_from {
            snapshots.push(snapshot(model));
        }
    }

    for (id, before) in frozen_before {
        if model.params().get(id).data() != before.data() {
            return Err(Error::InvalidArgument(format!("frozen parameter {} changed", model.params().name(id))));
        }
    }
    Ok(StageReport {
        curve,
        snapshots,
        steps: adam.step_count(),
    })
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
    pub stages: Vec<String>,
}

/// Runs the recipe's stages in order on one model, then averages the
/// snapshots of the last stage's final epochs.
pub fn run_schedule(
    model: &mut LaNat,
    recipe: Recipe,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ScheduleReport> {
    run_stages(model, &recipe.stages(cfg), data, cfg, seed)
}

pub fn run_stages(
    model: &mut LaNat,
    plans: &[StagePlan],
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ScheduleReport> {
    run_stages_observed(model, plans, data, cfg, seed, |_, _| {})
}

/// [`run_stages`] that hands the model to `observe` as each stage ends,
/// before the final checkpoint averaging.
pub fn run_stages_observed(
    model: &mut LaNat,
    plans: &[StagePlan],
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    mut observe: impl FnMut(&StagePlan, &LaNat),
) -> Result<ScheduleReport> {
    if plans.is_empty() {
        return Err(Error::InvalidArgument("recipe has no stages".into()));
    }
    let mut curve = Vec::new();
    let mut stages = Vec::new();
    let mut last = None;
    for plan in plans {
        let report = train_stage(model, plan, data, cfg, seed)?;
        observe(plan, model);
        curve.extend(report.curve);
        stages.push(plan.label.clone());
        last = Some(report.snapshots);
    }
    let snapshots = last.unwrap_or_default();
    if !snapshots.is_empty() {
        let checkpoints: Vec<Checkpoint> = snapshots
            .into_iter()
            .map(|params| {
                let mut c = Checkpoint::from_model(model, stages.clone());
                for ((_, t), v) in c.params.iter_mut().zip(params) {
                    *t = v;
                }
                c
            })
            .collect();
        average_checkpoints(&checkpoints)?.restore_into(model)?;
    }
    Ok(ScheduleReport {
        checkpoint: Checkpoint::from_model(model, stages.clone()),
        curve,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticSpec};
    use crate::model::LaNatConfig;

    fn tiny_corpus() -> crate::data::Corpus {
        let spec = SyntheticSpec {
            vocab_size: 4,
            feature_dim: 6,
            min_tokens: 1,
            max_tokens: 3,
            train_size: 4,
            test_size: 1,
            text_size: 4,
            ..SyntheticSpec::default()
        };
        generate_corpus(&spec).unwrap()
    }

    fn toy_model() -> LaNat {
        LaNat::new(LaNatConfig::toy(), 1).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            text_epochs: 2,
            speech_epochs: 2,
            joint_epochs: 2,
            batch_frames: 200,
            batch_tokens: 6,
            warmup_steps: 2,
            average_last: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_plans_match_schedule() {
        let s1 = StagePlan::text_pretrain(1);
        assert_eq!((s1.data, s1.weights), (DataMode::TextOnly, LossWeights::TEXT_PRETRAIN));
        let s2 = StagePlan::speech(1);
        assert_eq!(s2.frozen, vec![TOKEN_EMBEDDING.to_string()]);
        assert_eq!(s2.weights, LossWeights { ctc: 0.3, contrastive: 0.0, ce_text: 0.0, ce_speech: 1.0 });
        let s3 = StagePlan::joint(1);
        assert_eq!(s3.weights, LossWeights { ctc: 0.3, contrastive: 1.0, ce_text: 0.3, ce_speech: 1.0 });
        assert!(StagePlan::scratch(1).frozen.is_empty());
        for p in [s1, s2, s3] {
            p.validate().unwrap();
        }
        let bad = StagePlan { data: DataMode::TextOnly, ..StagePlan::joint(1) };
        assert!(bad.validate().is_err());
        let labels: Vec<_> = Recipe::Steps123.stages(&quick()).iter().map(|s| s.stage).collect();
        assert_eq!(labels, vec![1, 2, 3]);
        assert_eq!("steps13".parse::<Recipe>().unwrap(), Recipe::Steps13);
        assert!("steps2".parse::<Recipe>().is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { peak_learning_rate: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        assert_eq!(cfg.learning_rate(1), 0.25);
        assert_eq!(cfg.learning_rate(4), 1.0);
        assert_eq!(cfg.learning_rate(16), 0.5);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let c = tiny_corpus();
        let mut m = toy_model();
        let before = Checkpoint::from_model(&m, vec![]);
        let data = TrainingData { speech: &c.train, text: &c.text };
        let r = train_stage(&mut m, &StagePlan::speech(0), data, &quick(), 0).unwrap();
        assert!(r.curve.is_empty());
        assert_eq!(Checkpoint::from_model(&m, vec![]), before);
    }

    #[test]
    fn speech_stage_freezes_embedding_and_moves_the_rest() {
        let c = tiny_corpus();
        let mut m = toy_model();
        let id = m.embedding_id();
        let emb = m.params().get(id).as_ref().clone();
        let mem = m.params().get(m.memory_id()).as_ref().clone();
        let data = TrainingData { speech: &c.train, text: &c.text };
        let r = train_stage(&mut m, &StagePlan::speech(2), data, &quick(), 0).unwrap();
        assert_eq!(m.params().get(id).as_ref(), &emb);
        assert_ne!(m.params().get(m.memory_id()).as_ref(), &mem);
        assert!(r.curve.iter().all(|rec| rec.value.is_finite()));
        assert_eq!(r.snapshots.len(), 2);
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let c = tiny_corpus();
        let m = toy_model();
        let examples: Vec<Example<'_>> = c.train.iter().map(Example::Speech).collect();
        let trainable = vec![true; m.params().len()];
        let w = LossWeights::JOINT;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let whole = accumulate_gradients(&m, &examples, &w, &trainable, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut parts = accumulate_gradients(&m, &examples[..2], &w, &trainable, &mut rng).unwrap();
        parts.merge(accumulate_gradients(&m, &examples[2..], &w, &trainable, &mut rng).unwrap());
        for (a, b) in whole.grads.iter().zip(&parts.grads) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x - y).abs() <= 1e-10);
                    }
                }
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
    }

    #[test]
    fn schedule_is_deterministic_and_records_provenance() {
        let c = tiny_corpus();
        let data = TrainingData { speech: &c.train, text: &c.text };
        let run = || {
            let mut m = toy_model();
            run_schedule(&mut m, Recipe::Steps123, data, &quick(), 9).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.stages, vec!["stage1", "stage2", "stage3"]);
        assert_eq!(a.checkpoint.provenance, a.stages);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(loss_curve_csv(&a.curve), loss_curve_csv(&b.curve));
        assert!(loss_curve_csv(&a.curve).starts_with("stage,epoch,loss_name,value\n1,0,ce_text,"));
        let mut seen = Vec::new();
        let mut m = toy_model();
        let plans = Recipe::Steps123.stages(&quick());
        let observed = run_stages_observed(&mut m, &plans, data, &quick(), 9, |p, _| seen.push(p.stage)).unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert_eq!(observed.checkpoint.to_bytes(), a.checkpoint.to_bytes());
        let mut m = toy_model();
        let s = run_schedule(&mut m, Recipe::Scratch, data, &quick(), 9).unwrap();
        assert_eq!(s.stages, vec!["scratch"]);
    }

    #[test]
    fn divergence_restores_parameters() {
        let c = tiny_corpus();
        let mut m = toy_model();
        let data = TrainingData { speech: &c.train, text: &c.text };
        let cfg = TrainConfig { peak_learning_rate: 1e300, warmup_steps: 1, ..quick() };
        let err = train_stage(&mut m, &StagePlan::speech(3), data, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: 2, .. }), "{err}");
        let after = Checkpoint::from_model(&m, vec![]);
        assert!(after.params.iter().all(|(_, t)| t.all_finite()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut m = toy_model();
        let data = TrainingData { speech: &[], text: &[] };
        assert!(train_stage(&mut m, &StagePlan::speech(1), data, &quick(), 0).is_err());
    }
}
