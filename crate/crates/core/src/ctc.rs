//! Connectionist temporal classification: loss, greedy decoding, Viterbi
//! forced alignment and the trigger/fusion masks derived from alignments.
//!
//! Posteriors are `T × (V+1)` log-probability matrices with the blank at
//! column 0; vocabulary token `v` lives at column `v + 1`. All public
//! functions take and return vocabulary token ids.

use std::fmt::Write as _;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames a CTC path needs to emit `target`: one per
/// token plus a separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Blank-interleaved label sequence `[-, y1, -, y2, ..., yL, -]` in label
/// space.
fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target {
        ext.push(t + 1);
        ext.push(BLANK);
    }
    ext
}

fn check_inputs(log_probs: &Tensor, target: &[usize]) -> Result<()> {
    if log_probs.rank() != 2 {
        return Err(Error::shape("ctc", format!("expected T x (V+1), got {:?}", log_probs.shape())));
    }
    let classes = log_probs.cols();
    if let Some(&bad) = target.iter().find(|&&t| t + 1 >= classes) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: classes - 1 });
    }
    let frames = log_probs.rows();
    let required = min_frames(target);
    if target.is_empty() || frames < required {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required: required.max(1),
            frames,
        });
    }
    Ok(())
}

/// Whether state `s` of the extended sequence may be entered from `s - 2`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Negative log-likelihood of `target` and its gradient with respect to
/// every entry of `log_probs`, by the log-space forward-backward recursion.
pub fn ctc_nll_and_grad(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_inputs(log_probs, target)?;
    let (frames, classes) = (log_probs.rows(), log_probs.cols());
    let ext = extended(target);
    let states = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * classes + ext[s]];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc != neg {
                alpha[t * states + s] = acc + lp(t, s);
            }
        }
    }
    let last = (frames - 1) * states;
    let log_lik = log_add(alpha[last + states - 1], alpha[last + states - 2]);
    if log_lik == neg {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    let mut beta = vec![neg; frames * states];
    beta[last + states - 1] = lp(frames - 1, states - 1);
    beta[last + states - 2] = lp(frames - 1, states - 2);
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = &beta[(t + 1) * states..(t + 2) * states];
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && can_skip(&ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            if acc != neg {
                beta[t * states + s] = acc + lp(t, s);
            }
        }
    }

    // d(-log p)/d log_probs[t, k] = -sum over states labelled k of the
    // posterior occupancy alpha·beta / (y · p).
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let ab = alpha[t * states + s] + beta[t * states + s];
            if ab == neg {
                continue;
            }
            grad[t * classes + ext[s]] -= (ab - lp(t, s) - log_lik).exp();
        }
    }
    Ok((-log_lik, grad))
}

/// Differentiable CTC loss `-log P(target | log_probs)`.
pub fn ctc_loss<'t>(log_probs: Var<'t>, target: &[usize]) -> Result<Var<'t>> {
    let (nll, grad) = ctc_nll_and_grad(&log_probs.value(), target)?;
    log_probs.precomputed_scalar(nll, grad)
}

/// Merges repeats, then drops blanks. Input and output are in label space
/// and token space respectively.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l - 1);
        }
        prev = Some(l);
    }
    out
}

/// Per-frame argmax followed by [`collapse`].
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    collapse(&log_probs.argmax_rows())
}

/// A frame-level CTC labelling that collapses to a known target.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    /// Label per frame (0 = blank, `v + 1` = token `v`).
    pub labels: Vec<usize>,
    /// Inclusive frame interval `[start, end]` of each target token.
    pub spans: Vec<(usize, usize)>,
    /// Log-probability of the path under the posterior it was aligned on.
    pub log_prob: f64,
}

impl AlignmentPath {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn tokens(&self) -> Vec<usize> {
        collapse(&self.labels)
    }

    /// One `frame_idx<TAB>label` line per frame.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{l}");
        }
        s
    }
}

/// Maximum-probability path over the blank-interleaved target. Ties prefer
/// the predecessor with the smaller state index.
pub fn ctc_forced_align(log_probs: &Tensor, target: &[usize]) -> Result<AlignmentPath> {
    check_inputs(log_probs, target)?;
    let (frames, classes) = (log_probs.rows(), log_probs.cols());
    let ext = extended(target);
    let states = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * classes + ext[s]];
    let neg = f64::NEG_INFINITY;

    let mut score = vec![neg; frames * states];
    let mut back = vec![0usize; frames * states];
    score[0] = lp(0, 0);
    score[1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let prev = &score[(t - 1) * states..t * states];
            let mut best = neg;
            let mut from = s;
            let mut consider = |p: usize| {
                if prev[p] > best {
                    best = prev[p];
                    from = p;
                }
            };
            if can_skip(&ext, s) {
                consider(s - 2);
            }
            if s >= 1 {
                consider(s - 1);
            }
            consider(s);
            if best != neg {
                score[t * states + s] = best + lp(t, s);
                back[t * states + s] = from;
            }
        }
    }
    let last = (frames - 1) * states;
    let (mut state, best) = if score[last + states - 2] >= score[last + states - 1] {
        (states - 2, score[last + states - 2])
    } else {
        (states - 1, score[last + states - 1])
    };
    if best == neg {
        return Err(Error::NonFinite { op: "ctc_forced_align" });
    }
    let mut path_states = vec![0; frames];
    for t in (0..frames).rev() {
        path_states[t] = state;
        if t > 0 {
            state = back[t * states + state];
        }
    }
    let labels = path_states.iter().map(|&s| ext[s]).collect();
    let mut spans = vec![(usize::MAX, 0); target.len()];
    for (t, &s) in path_states.iter().enumerate() {
        if s % 2 == 1 {
            let span = &mut spans[s / 2];
            span.0 = span.0.min(t);
            span.1 = t;
        }
    }
    Ok(AlignmentPath {
        labels,
        spans,
        log_prob: best,
    })
}

/// `L × T` boolean scope: row `l` is true on frames `0..=min(e_l + lookahead, T-1)`
/// where `e_l` is the last frame of token `l`'s span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerMask {
    tokens: usize,
    frames: usize,
    allowed: Vec<bool>,
}

impl TriggerMask {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, l: usize, t: usize) -> bool {
        self.allowed[l * self.frames + t]
    }

    pub fn row(&self, l: usize) -> &[bool] {
        &self.allowed[l * self.frames..(l + 1) * self.frames]
    }
}

pub fn build_trigger_mask(path: &AlignmentPath, frames: usize, lookahead: usize) -> Result<TriggerMask> {
    if path.frames() != frames {
        return Err(Error::shape("trigger_mask", format!("path of {} frames vs T={frames}", path.frames())));
    }
    let tokens = path.spans.len();
    let mut allowed = vec![false; tokens * frames];
    for (l, &(_, end)) in path.spans.iter().enumerate() {
        let last = (end + lookahead).min(frames - 1);
        allowed[l * frames..=l * frames + last].fill(true);
    }
    Ok(TriggerMask { tokens, frames, allowed })
}

/// Decoder attention scope `[trigger | ones(L × M)]` over fine-grained frames
/// followed by `M` memory slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionMask {
    trigger: TriggerMask,
    slots: usize,
}

impl FusionMask {
    pub fn tokens(&self) -> usize {
        self.trigger.tokens
    }

    pub fn cols(&self) -> usize {
        self.trigger.frames + self.slots
    }

    pub fn get(&self, l: usize, c: usize) -> bool {
        if c < self.trigger.frames {
            self.trigger.get(l, c)
        } else {
            true
        }
    }

    pub fn to_attention_mask(&self) -> Result<AttentionMask> {
        let (rows, cols) = (self.tokens(), self.cols());
        let allowed = (0..rows * cols).map(|i| self.get(i / cols, i % cols)).collect();
        AttentionMask::new(rows, cols, allowed)
    }
}

pub fn build_fusion_mask(trigger: TriggerMask, slots: usize) -> FusionMask {
    FusionMask { trigger, slots }
}

/// Row-wise log-sum-exp deviation from zero, the largest over all rows.
pub fn posterior_normalization_error(log_probs: &Tensor) -> f64 {
    (0..log_probs.rows())
        .map(|r| {
            let row = log_probs.row(r);
            row.iter().fold(f64::NEG_INFINITY, |a, &b| log_add(a, b)).abs()
        })
        .fold(0.0, f64::max)
}
