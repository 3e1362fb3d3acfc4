//! Recognition reports, the parallel-versus-autoregressive latency
//! benchmark, and the training-recipe ablation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::data::{cer, edit_distance, Utterance};
use crate::error::{Error, Result};
use crate::model::{ArBaseline, LaNat, LaNatConfig};
use crate::tensor::Tensor;
use crate::trainer::{run_schedule, Recipe, TrainConfig, TrainingData};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub utt_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: usize,
    pub cer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Total edits over total reference tokens.
    pub cer: f64,
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl EvalReport {
    /// CSV with header `utt_id,ref,hyp,edits,cer`; tokens are space-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,ref,hyp,edits,cer\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.utt_id,
                join(&r.reference),
                join(&r.hypothesis),
                r.edits,
                r.cer
            ));
        }
        out
    }
}

/// Decodes every utterance with the parallel decoder and scores it.
pub fn evaluate(model: &LaNat, utterances: &[Utterance]) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(utterances.len());
    let (mut edits, mut total) = (0, 0);
    for u in utterances {
        let hypothesis = model.decode_nar(&u.frames)?;
        let e = edit_distance(&hypothesis, &u.tokens);
        rows.push(EvalRow {
            utt_id: u.id.clone(),
            cer: cer(&hypothesis, &u.tokens)?,
            reference: u.tokens.clone(),
            hypothesis,
            edits: e,
        });
        edits += e;
        total += u.tokens.len();
    }
    Ok(EvalReport {
        rows,
        cer: edits as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub nar_ms: f64,
    pub ar_ms: f64,
    pub speedup: f64,
    /// Decoder passes of one parallel decode (acoustic + decoder).
    pub nar_passes: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("L,nar_ms,ar_ms,speedup\n");
    for r in rows {
        out.push_str(&format!("{},{:.3},{:.3},{:.3}\n", r.len, r.nar_ms, r.ar_ms, r.speedup));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    /// Untimed runs before measuring.
    pub warmup: usize,
    /// Timed runs; the median is reported.
    pub repeats: usize,
    /// Input frames synthesized per output token.
    pub frames_per_token: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![5, 10, 20, 30],
            warmup: 3,
            repeats: 5,
            frames_per_token: 10,
            seed: 0,
        }
    }
}

fn median_ms(mut f: impl FnMut() -> Result<()>, warmup: usize, repeats: usize) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Times the parallel decoder against greedy autoregressive decoding of the
/// same number of tokens. Inputs are random frames; the parallel decoder is
/// pinned to a fixed hypothesis of the requested length, and the
/// autoregressive decoder runs exactly that many steps.
pub fn benchmark(model: &LaNat, ar: &ArBaseline, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let cfg = model.config();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for &len in &opts.lengths {
        if len == 0 {
            return Err(Error::InvalidArgument("benchmark lengths must be >= 1".into()));
        }
        let frames = Tensor::from_fn(&[len * opts.frames_per_token.max(4), cfg.feature_dim], |_| {
            noise.sample(&mut rng)
        });
        let hypothesis: Vec<usize> = (0..len).map(|i| i % cfg.vocab_size).collect();
        model.passes().reset();
        model.decode_nar_with_hypothesis(&frames, &hypothesis)?;
        let nar_passes = model.passes().acoustic() + model.passes().decoder();
        let nar_ms = median_ms(
            || model.decode_nar_with_hypothesis(&frames, &hypothesis).map(drop),
            opts.warmup,
            opts.repeats,
        )?;
        let ar_ms = median_ms(|| ar.decode_fixed(model, &frames, len).map(drop), opts.warmup, opts.repeats)?;
        rows.push(BenchRow {
            len,
            nar_ms,
            ar_ms,
            speedup: ar_ms / nar_ms,
            nar_passes,
        });
    }
    Ok(rows)
}

/// Autoregressive decoder depth matching the parallel decoder's.
pub fn ar_layers(cfg: &LaNatConfig) -> usize {
    cfg.decoder_cross_layers + cfg.decoder_refine_layers
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub recipe: Recipe,
    pub seed: u64,
    pub test_cer: f64,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// Mean test CER of `recipe` over its seeds.
    pub fn mean_cer(&self, recipe: Recipe) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.recipe == recipe).map(|c| c.test_cer).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn cell(&self, recipe: Recipe, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.recipe == recipe && c.seed == seed)
    }

    /// One row per recipe and seed: `recipe,label,seed,test_cer`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recipe,label,seed,test_cer\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.recipe, c.recipe.description(), c.seed, c.test_cer));
        }
        out
    }

    /// One row per recipe: `recipe,label,mean_test_cer,n_seeds`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("recipe,label,mean_test_cer,n_seeds\n");
        for r in Recipe::ALL {
            let n = self.cells.iter().filter(|c| c.recipe == r).count();
            if let Some(m) = self.mean_cer(r) {
                out.push_str(&format!("{},{},{},{}\n", r, r.description(), m, n));
            }
        }
        out
    }
}

/// Trains every recipe from a fresh model for every seed and scores the
/// test split. The seed drives both initialization and training.
pub fn run_ablation(
    data: TrainingData<'_>,
    test: &[Utterance],
    model_cfg: &LaNatConfig,
    train_cfg: &TrainConfig,
    recipes: &[Recipe],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationCell),
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for &recipe in recipes {
        for &seed in seeds {
            let mut model = LaNat::new(model_cfg.clone(), seed)?;
            let schedule = run_schedule(&mut model, recipe, data, train_cfg, seed)?;
            let report = evaluate(&model, test)?;
            let cell = AblationCell {
                recipe,
                seed,
                test_cer: report.cer,
                checkpoint: schedule.checkpoint,
                report,
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(AblationReport { cells })
}
