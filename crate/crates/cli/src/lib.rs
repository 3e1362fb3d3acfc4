//! Command-line front end: corpus generation, training recipes, evaluation,
//! alignment inspection, latency benchmark and recipe ablation.

pub mod config;

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lanat_core::checkpoint::Checkpoint;
use lanat_core::data::{
    generate_corpus, read_sentences, read_utterances, write_sentences, write_utterances, Utterance,
};
use lanat_core::eval::{ar_layers, bench_csv, benchmark, evaluate, run_ablation, BenchOptions};
use lanat_core::model::{ArBaseline, LaNat, LaNatConfig};
use lanat_core::trainer::{loss_curve_csv, run_schedule, Recipe, TrainingData};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lanat", version, about = "Non-autoregressive speech recognition on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Base,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (`--seed` sets the corpus seed).
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model with one of the staged recipes.
    Train {
        #[command(flatten)]
        common: Common,
        /// scratch, step3, steps13 or steps123.
        #[arg(long, default_value = "steps123")]
        recipe: Recipe,
        /// Corpus directory written by `gen`; generated from the config if absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Decode a split and write a per-utterance CER report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Print the forced CTC alignment of one utterance.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Utterance id.
        #[arg(long)]
        utt: String,
    },
    /// Time parallel against autoregressive decoding.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model to time; otherwise a fresh model of `--preset` size.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "base")]
        preset: Preset,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
        lengths: Vec<usize>,
        /// Untimed runs before measuring.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Train every recipe over several seeds and tabulate test CER.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the configured seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

struct Setup {
    cfg: RunConfig,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Setup> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    let out = cfg.out.clone();
    Ok(Setup { cfg, out })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Speech splits and text sentences, from a `gen` directory or generated.
struct CorpusFiles {
    train: Vec<Utterance>,
    test: Vec<Utterance>,
    text: Vec<Vec<usize>>,
}

fn load_corpus(dir: Option<&Path>, cfg: &RunConfig) -> Result<CorpusFiles> {
    let Some(dir) = dir else {
        let c = generate_corpus(&cfg.data)?;
        return Ok(CorpusFiles { train: c.train, test: c.test, text: c.text });
    };
    let open = |name: &str| -> Result<BufReader<std::fs::File>> {
        let p = dir.join(name);
        Ok(BufReader::new(std::fs::File::open(&p).with_context(|| format!("cannot open {}", p.display()))?))
    };
    Ok(CorpusFiles {
        train: read_utterances(open("train.tsv")?)?,
        test: read_utterances(open("test.tsv")?)?,
        text: read_sentences(open("text.txt")?)?,
    })
}

fn split<'a>(c: &'a CorpusFiles, s: Split) -> &'a [Utterance] {
    match s {
        Split::Train => &c.train,
        Split::Test => &c.test,
    }
}

fn load_model(path: &Path) -> Result<LaNat> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

/// Executes one command, writing human-readable progress to `log`.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let mut s = setup(&common).context("gen")?;
            if let Some(seed) = common.seed {
                s.cfg.data.seed = seed;
            }
            gen(&s, log).context("gen")
        }
        Command::Train { common, recipe, corpus } => train(&setup(&common)?, recipe, corpus.as_deref(), log).context("train"),
        Command::Eval { common, checkpoint, corpus, split: sp } => {
            eval(&setup(&common)?, &checkpoint, corpus.as_deref(), sp, log).context("eval")
        }
        Command::Align { common, checkpoint, corpus, split: sp, utt } => {
            align(&setup(&common)?, &checkpoint, corpus.as_deref(), sp, &utt, log).context("align")
        }
        Command::Bench { common, checkpoint, preset, lengths, warmup, repeats } => {
            let opts = BenchOptions { lengths, warmup, repeats, ..BenchOptions::default() };
            bench(&setup(&common)?, checkpoint.as_deref(), preset, &opts, log).context("bench")
        }
        Command::Ablate { common, seeds, corpus } => ablate(&setup(&common)?, seeds, corpus.as_deref(), log).context("ablate"),
    }
}

fn gen(s: &Setup, log: &mut dyn Write) -> Result<()> {
    let c = generate_corpus(&s.cfg.data)?;
    ensure_dir(&s.out)?;
    let mut buf = Vec::new();
    write_utterances(&mut buf, &c.train)?;
    write_file(&s.out.join("train.tsv"), &buf)?;
    buf.clear();
    write_utterances(&mut buf, &c.test)?;
    write_file(&s.out.join("test.tsv"), &buf)?;
    buf.clear();
    write_sentences(&mut buf, &c.text)?;
    write_file(&s.out.join("text.txt"), &buf)?;
    writeln!(
        log,
        "wrote {} train, {} test utterances and {} sentences to {}",
        c.train.len(),
        c.test.len(),
        c.text.len(),
        s.out.display()
    )?;
    Ok(())
}

fn train(s: &Setup, recipe: Recipe, corpus: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let c = load_corpus(corpus, &s.cfg)?;
    let mut model = LaNat::new(s.cfg.model.clone(), s.cfg.seed)?;
    let data = TrainingData { speech: &c.train, text: &c.text };
    let report = run_schedule(&mut model, recipe, data, &s.cfg.train, s.cfg.seed)?;
    ensure_dir(&s.out)?;
    report.checkpoint.save(s.out.join("model.ckpt"))?;
    write_file(&s.out.join("loss_curve.csv"), loss_curve_csv(&report.curve))?;
    writeln!(log, "recipe {recipe}: ran {}", report.stages.join(", "))?;
    if let Some(last) = report.curve.iter().rev().find(|r| r.loss == "total") {
        writeln!(log, "final stage {} epoch {} total loss {:.4}", last.stage, last.epoch, last.value)?;
    }
    writeln!(log, "checkpoint written to {}", s.out.join("model.ckpt").display())?;
    Ok(())
}

fn eval(s: &Setup, checkpoint: &Path, corpus: Option<&Path>, sp: Split, log: &mut dyn Write) -> Result<()> {
    let model = load_model(checkpoint)?;
    let c = load_corpus(corpus, &s.cfg)?;
    let report = evaluate(&model, split(&c, sp))?;
    ensure_dir(&s.out)?;
    write_file(&s.out.join("eval.csv"), report.to_csv())?;
    writeln!(log, "CER {:.4} over {} utterances", report.cer, report.rows.len())?;
    Ok(())
}

fn align(s: &Setup, checkpoint: &Path, corpus: Option<&Path>, sp: Split, utt: &str, log: &mut dyn Write) -> Result<()> {
    let model = load_model(checkpoint)?;
    let c = load_corpus(corpus, &s.cfg)?;
    let Some(u) = split(&c, sp).iter().find(|u| u.id == utt) else {
        bail!("no utterance {utt:?} in the {sp:?} split");
    };
    let path = model.align(&u.frames, &u.tokens)?;
    log.write_all(path.to_text().as_bytes())?;
    Ok(())
}

fn bench(s: &Setup, checkpoint: Option<&Path>, preset: Preset, opts: &BenchOptions, log: &mut dyn Write) -> Result<()> {
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let cfg = match preset {
                Preset::Desk => s.cfg.model.clone(),
                Preset::Base => LaNatConfig::base_paper(),
            };
            LaNat::new(cfg, s.cfg.seed)?
        }
    };
    let ar = ArBaseline::new(model.config(), ar_layers(model.config()), s.cfg.seed)?;
    let rows = benchmark(&model, &ar, opts)?;
    let csv = bench_csv(&rows);
    ensure_dir(&s.out)?;
    write_file(&s.out.join("bench.csv"), &csv)?;
    log.write_all(csv.as_bytes())?;
    Ok(())
}

fn ablate(s: &Setup, seeds: Option<usize>, corpus: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let n = seeds.unwrap_or(s.cfg.ablation_seeds);
    if n == 0 {
        bail!("--seeds must be >= 1");
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| s.cfg.seed + i).collect();
    let c = load_corpus(corpus, &s.cfg)?;
    let data = TrainingData { speech: &c.train, text: &c.text };
    let report = run_ablation(data, &c.test, &s.cfg.model, &s.cfg.train, &Recipe::ALL, &seeds, |cell| {
        let _ = writeln!(log, "{} seed {}: test CER {:.4}", cell.recipe, cell.seed, cell.test_cer);
    })?;
    ensure_dir(&s.out)?;
    write_file(&s.out.join("ablation.csv"), report.to_csv())?;
    let summary = report.summary_csv();
    write_file(&s.out.join("ablation_summary.csv"), &summary)?;
    log.write_all(summary.as_bytes())?;
    Ok(())
}
