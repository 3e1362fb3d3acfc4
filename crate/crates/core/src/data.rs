//! Deterministic synthetic speech corpus, batching, and the character error
//! rate metric.
//!
//! Every token owns a random prototype frame. An utterance plays each
//! token's prototype for a random number of frames with Gaussian noise on
//! top, and token sequences follow a random bigram language, so both the
//! acoustic and the lexical side carry learnable structure.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::subsampled_len;
use crate::tensor::Tensor;

/// Successors with nonzero probability per token in the bigram language.
const BIGRAM_FAN_OUT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Shortest run of frames per token.
    pub min_duration: usize,
    /// Longest run of frames per token.
    pub max_duration: usize,
    /// Standard deviation of the additive frame noise.
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Extra text-only sentences from the same language.
    pub text_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feature_dim: 20,
            min_duration: 9,
            max_duration: 12,
            noise: 0.3,
            min_tokens: 4,
            max_tokens: 12,
            train_size: 300,
            test_size: 50,
            text_size: 300,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Error::Config { component: "data", field, reason };
        if self.vocab_size < 2 {
            return Err(bad("vocab_size", "must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(bad("feature_dim", "must be >= 1".into()));
        }
        if self.min_duration == 0 {
            return Err(bad("min_duration", "must be >= 1".into()));
        }
        if self.max_duration < self.min_duration {
            return Err(bad("max_duration", "must be >= min_duration".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(bad("noise", "must be finite and >= 0".into()));
        }
        if self.min_tokens == 0 {
            return Err(bad("min_tokens", "must be >= 1".into()));
        }
        if self.max_tokens < self.min_tokens {
            return Err(bad("max_tokens", "must be >= min_tokens".into()));
        }
        for tokens in self.min_tokens..=self.max_tokens {
            let frames = subsampled_len(self.min_duration * tokens);
            if frames < 2 * tokens + 1 {
                return Err(bad(
                    "min_duration",
                    format!(
                        "{} frames per token leave {frames} encoder frames for {tokens} tokens, need {}",
                        self.min_duration,
                        2 * tokens + 1
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T′ × F` feature frames.
    pub frames: Tensor,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// First-order Markov language over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Bigram {
    /// Row-stochastic `V × V` transition matrix with a zero diagonal.
    transitions: Vec<Vec<f64>>,
}

impl Bigram {
    fn random(vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_out = BIGRAM_FAN_OUT.min(vocab - 1);
        let transitions = (0..vocab)
            .map(|from| {
                let mut others: Vec<usize> = (0..vocab).filter(|&t| t != from).collect();
                others.shuffle(rng);
                let mut row = vec![0.0; vocab];
                for &to in &others[..fan_out] {
                    row[to] = rng.gen_range(0.2..1.0);
                }
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
                row
            })
            .collect();
        Self { transitions }
    }

    pub fn vocab_size(&self) -> usize {
        self.transitions.len()
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.transitions[from][to]
    }

    fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let mut u: f64 = rng.gen();
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Uniform first token, then bigram transitions.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(rng.gen_range(0..self.vocab_size()));
        while out.len() < len {
            let prev = out[out.len() - 1];
            out.push(Self::pick(&self.transitions[prev], rng));
        }
        out
    }

    /// Exact token frequency at a uniformly chosen position of a sentence
    /// whose length is uniform on `min_len..=max_len`.
    pub fn unigram(&self, min_len: usize, max_len: usize) -> Vec<f64> {
        let v = self.vocab_size();
        let mut marginal = vec![1.0 / v as f64; v];
        let mut per_position = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            per_position.push(marginal.clone());
            let mut next = vec![0.0; v];
            for (from, &p) in marginal.iter().enumerate() {
                for (to, q) in next.iter_mut().enumerate() {
                    *q += p * self.transitions[from][to];
                }
            }
            marginal = next;
        }
        let lengths = max_len - min_len + 1;
        let mut freq = vec![0.0; v];
        for len in min_len..=max_len {
            for pos in &per_position[..len] {
                for (f, &p) in freq.iter_mut().zip(pos) {
                    *f += p / (len * lengths) as f64;
                }
            }
        }
        freq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    /// `V × F` token prototypes.
    pub prototypes: Tensor,
    pub language: Bigram,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Text-only sentences from the same language.
    pub text: Vec<Vec<usize>>,
}

/// Builds the whole corpus from `spec`; a pure function of the spec.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes = Tensor::from_fn(&[spec.vocab_size, spec.feature_dim], |_| standard.sample(&mut rng));
    let language = Bigram::random(spec.vocab_size, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let utterance = |id: String, rng: &mut ChaCha8Rng| -> Result<Utterance> {
        let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let tokens = language.sample(len, rng);
        let mut data = Vec::new();
        for &t in &tokens {
            let run = rng.gen_range(spec.min_duration..=spec.max_duration);
            for _ in 0..run {
                data.extend(prototypes.row(t).iter().map(|&p| p + noise.sample(rng)));
            }
        }
        let frames = Tensor::new(&[data.len() / spec.feature_dim, spec.feature_dim], data)?;
        debug_assert!(subsampled_len(frames.rows()) > 2 * tokens.len());
        Ok(Utterance { id, frames, tokens })
    };
    let train = (0..spec.train_size)
        .map(|i| utterance(format!("train-{i:05}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.test_size)
        .map(|i| utterance(format!("test-{i:05}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let text = (0..spec.text_size)
        .map(|_| {
            let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
            language.sample(len, &mut rng)
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        prototypes,
        language,
        train,
        test,
        text,
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn cer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level rate: total edits over total reference tokens.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64> {
    let (mut edits, mut total) = (0, 0);
    for (hyp, reference) in pairs {
        edits += edit_distance(hyp, reference);
        total += reference.len();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    Ok(edits as f64 / total as f64)
}

/// Groups item indices into shuffled batches whose summed `sizes` stay
/// within `budget`. The order depends only on `(seed, epoch)`.
pub fn batch_iter(sizes: &[usize], budget: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty corpus".into()));
    }
    if let Some(i) = sizes.iter().position(|&s| s > budget) {
        return Err(Error::InvalidArgument(format!(
            "item {i} has {} frames, more than the batch budget {budget}",
            sizes[i]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut filled = 0;
    for i in order {
        if filled + sizes[i] > budget {
            batches.push(std::mem::take(&mut current));
            filled = 0;
        }
        current.push(i);
        filled += sizes[i];
    }
    batches.push(current);
    Ok(batches)
}

/// Writes one tab-separated record per utterance:
/// `id, token ids, T′, F, row-major frame values`.
pub fn write_utterances(mut out: impl Write, utterances: &[Utterance]) -> Result<()> {
    for u in utterances {
        let tokens: Vec<String> = u.tokens.iter().map(usize::to_string).collect();
        let frames: Vec<String> = u.frames.data().iter().map(f64::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            u.id,
            tokens.join(" "),
            u.frames.rows(),
            u.frames.cols(),
            frames.join(" ")
        )?;
    }
    Ok(())
}

pub fn read_utterances(input: impl BufRead) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, tokens, rows, cols, frames] = fields[..] else {
            return Err(bad("expected 5 tab-separated fields"));
        };
        let tokens = tokens
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad("bad token id"))?;
        let rows: usize = rows.parse().map_err(|_| bad("bad frame count"))?;
        let cols: usize = cols.parse().map_err(|_| bad("bad feature dimension"))?;
        let data = frames
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad("bad frame value"))?;
        let frames = Tensor::new(&[rows, cols], data).map_err(|e| bad(&e.to_string()))?;
        out.push(Utterance { id: id.to_string(), frames, tokens });
    }
    Ok(out)
}

/// One sentence per line, space-separated token ids.
pub fn write_sentences(mut out: impl Write, sentences: &[Vec<usize>]) -> Result<()> {
    for s in sentences {
        let tokens: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(out, "{}", tokens.join(" "))?;
    }
    Ok(())
}

pub fn read_sentences(input: impl BufRead) -> Result<Vec<Vec<usize>>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(l) if l.trim().is_empty()))
        .map(|(n, line)| {
            line?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("line {}: bad token id", n + 1))))
                .collect()
        })
        .collect()
}
