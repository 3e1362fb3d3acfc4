//! Training objectives: symmetric contrastive loss between speech and text
//! memory slots, token cross-entropy, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric InfoNCE over the `M × M` cosine-similarity matrix of the two
/// slot sets, with matching slots as positives. Summed over slots.
///
/// Each slot's loss is the negative log of its matching partner's share
/// under a softmax of similarities divided by `temperature`, once with
/// speech slots as anchors and once with text slots as anchors.
pub fn contrastive_loss<'t>(speech: Var<'t>, text: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let (a, b) = (speech.shape(), text.shape());
    if a.len() != 2 || a != b {
        return Err(Error::shape("contrastive_loss", format!("{a:?} vs {b:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let slots: Vec<usize> = (0..a[0]).collect();
    let sim = speech.normalize_rows()?.matmul_t(text.normalize_rows()?)?.scale(1.0 / temperature)?;
    let speech_anchored = sim.log_softmax(1)?.pick_per_row(&slots)?.sum()?;
    let text_anchored = sim.log_softmax(0)?.pick_per_row(&slots)?.sum()?;
    speech_anchored.add(text_anchored)?.scale(-1.0)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`L × V`).
pub fn cross_entropy_tokens<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape(
            "cross_entropy_tokens",
            format!("logits {shape:?} for {} targets", targets.len()),
        ));
    }
    if let Some(&id) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(Error::TokenOutOfRange { id, vocab: shape[1] });
    }
    logits.log_softmax(1)?.pick_per_row(targets)?.mean()?.scale(-1.0)
}

/// Weights on (CTC, contrastive, text reconstruction, speech recognition).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ctc: f64,
    pub contrastive: f64,
    pub ce_text: f64,
    pub ce_speech: f64,
}

impl LossWeights {
    /// Text-only pre-training of the shared modules.
    pub const TEXT_PRETRAIN: Self = Self { ctc: 0.0, contrastive: 0.0, ce_text: 1.0, ce_speech: 0.0 };
    /// Speech recognition with the embedding frozen; also used from scratch.
    pub const SPEECH: Self = Self { ctc: 0.3, contrastive: 0.0, ce_text: 0.0, ce_speech: 1.0 };
    /// Joint speech and text training with contrastive alignment.
    pub const JOINT: Self = Self { ctc: 0.3, contrastive: 1.0, ce_text: 0.3, ce_speech: 1.0 };

    pub fn validate(&self) -> Result<()> {
        for (field, w) in [
            ("ctc", self.ctc),
            ("contrastive", self.contrastive),
            ("ce_text", self.ce_text),
            ("ce_speech", self.ce_speech),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config {
                    component: "loss_weights",
                    field,
                    reason: format!("must be finite and >= 0, got {w}"),
                });
            }
        }
        Ok(())
    }

    pub fn uses_text(&self) -> bool {
        self.contrastive > 0.0 || self.ce_text > 0.0
    }

    pub fn uses_speech(&self) -> bool {
        self.ctc > 0.0 || self.contrastive > 0.0 || self.ce_speech > 0.0
    }
}

/// Individual loss terms of one example; absent terms were not computed.
#[derive(Clone, Copy, Default)]
pub struct LossParts<'t> {
    pub ctc: Option<Var<'t>>,
    pub contrastive: Option<Var<'t>>,
    pub ce_text: Option<Var<'t>>,
    pub ce_speech: Option<Var<'t>>,
}

impl<'t> LossParts<'t> {
    /// Scalar values of the present terms, in weight order.
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.ctc, self.contrastive, self.ce_text, self.ce_speech].map(|p| p.map(|v| v.value().item()))
    }
}

/// `Σ wᵢ·partᵢ` over terms with a nonzero weight. A nonzero weight on an
/// absent term is an error; all-zero weights give a constant zero.
pub fn composite_loss<'t>(tape: &'t Tape, parts: &LossParts<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    weights.validate()?;
    let terms = [
        ("ctc", weights.ctc, parts.ctc),
        ("contrastive", weights.contrastive, parts.contrastive),
        ("ce_text", weights.ce_text, parts.ce_text),
        ("ce_speech", weights.ce_speech, parts.ce_speech),
    ];
    let mut total: Option<Var<'t>> = None;
    for (name, w, part) in terms {
        if w == 0.0 {
            continue;
        }
        let part = part.ok_or_else(|| Error::InvalidArgument(format!("loss term {name} has weight {w} but was not computed")))?;
        let term = part.scale(w)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
    }

    fn contrastive_value(o: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
        let tape = Tape::new();
        Ok(contrastive_loss(tape.constant(o.clone()), tape.constant(y.clone()), tau)?.value().item())
    }

    /// Direct evaluation from the definition with plain loops.
    fn contrastive_oracle(o: &Tensor, y: &Tensor, tau: f64) -> f64 {
        let m = o.rows();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let dot: f64 = o.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
                        dot / (norm(o.row(i)) * norm(y.row(j))) / tau
                    })
                    .collect()
            })
            .collect();
        let mut loss = 0.0;
        for i in 0..m {
            let row: f64 = (0..m).map(|j| s[i][j].exp()).sum();
            let col: f64 = (0..m).map(|j| s[j][i].exp()).sum();
            loss -= (s[i][i].exp() / row).ln() + (s[i][i].exp() / col).ln();
        }
        loss
    }

    #[test]
    fn single_slot_is_zero() {
        let v = contrastive_value(&random(1, 5, 1), &random(1, 5, 2), 0.1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn orthonormal_pair_value() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = contrastive_value(&e, &e, 1.0).unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn matches_loop_oracle() {
        for seed in 0..5 {
            let (o, y) = (random(4, 6, seed), random(4, 6, seed + 100));
            let v = contrastive_value(&o, &y, 0.3).unwrap();
            assert!((v - contrastive_oracle(&o, &y, 0.3)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_slot_rejected() {
        let mut o = random(3, 4, 3);
        o.data_mut()[4..8].fill(0.0);
        assert!(matches!(contrastive_value(&o, &random(3, 4, 4), 0.1), Err(Error::ZeroNorm { .. })));
        assert!(contrastive_value(&random(3, 4, 3), &random(2, 4, 4), 0.1).is_err());
    }

    #[test]
    fn contrastive_gradient_check() {
        let y = random(3, 4, 5);
        let err = check_gradient(
            |t, x| contrastive_loss(x, t.constant(y.clone()), 0.5),
            &random(3, 4, 6),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn power_of_two_scaling_is_bit_exact() {
        let (o, y) = (random(4, 5, 7), random(4, 5, 8));
        let base = contrastive_value(&o, &y, 0.1).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let scaled = Tensor::from_fn(&[4, 5], |i| o.data()[i] * c);
            assert_eq!(contrastive_value(&scaled, &y, 0.1).unwrap(), base);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_oracle() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let v = cross_entropy_tokens(logits, &[0, 3, 2]).unwrap().value().item();
        assert!((v - 4f64.ln()).abs() < 1e-12);

        let t = random(5, 7, 9);
        let targets = [6, 0, 3, 3, 1];
        let v = cross_entropy_tokens(tape.constant(t.clone()), &targets).unwrap().value().item();
        let oracle: f64 = (0..5)
            .map(|r| {
                let z: f64 = t.row(r).iter().map(|v| v.exp()).sum();
                -(t.at(r, targets[r]).exp() / z).ln()
            })
            .sum::<f64>()
            / 5.0;
        assert!((v - oracle).abs() < 1e-12);
        assert!(cross_entropy_tokens(tape.constant(t.clone()), &[0, 1]).is_err());
        assert!(matches!(
            cross_entropy_tokens(tape.constant(t), &[0, 1, 2, 3, 7]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let err = check_gradient(|_, x| cross_entropy_tokens(x, &[1, 0, 2]), &random(3, 3, 10), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn composite_weighting() {
        let tape = Tape::new();
        let c = |v: f64| Some(tape.constant(Tensor::scalar(v)));
        let parts = LossParts { ctc: c(2.0), contrastive: c(3.0), ce_text: c(5.0), ce_speech: c(7.0) };
        let v = composite_loss(&tape, &parts, &LossWeights::JOINT).unwrap().value().item();
        assert!((v - (0.3 * 2.0 + 3.0 + 0.3 * 5.0 + 7.0)).abs() < 1e-12);
        let zero = LossWeights { ctc: 0.0, contrastive: 0.0, ce_text: 0.0, ce_speech: 0.0 };
        assert_eq!(composite_loss(&tape, &parts, &zero).unwrap().value().item(), 0.0);
        let partial = LossParts { ce_text: c(1.0), ..Default::default() };
        assert!(composite_loss(&tape, &partial, &LossWeights::SPEECH).is_err());
        assert_eq!(composite_loss(&tape, &partial, &LossWeights::TEXT_PRETRAIN).unwrap().value().item(), 1.0);
        let neg = LossWeights { ctc: -1.0, ..LossWeights::SPEECH };
        assert!(neg.validate().is_err());
    }

    fn matrix(m: usize, d: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, m * d).prop_filter_map("non-degenerate rows", move |v| {
            let t = Tensor::new(&[m, d], v).ok()?;
            (0..m).all(|r| t.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-3).then_some(t)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn contrastive_is_swap_symmetric_and_nonnegative(
            (o, y) in (1usize..5, 1usize..5).prop_flat_map(|(m, d)| (matrix(m, d), matrix(m, d))),
            tau in 0.05f64..2.0,
        ) {
            let a = contrastive_value(&o, &y, tau).unwrap();
            let b = contrastive_value(&y, &o, tau).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn contrastive_is_scale_invariant(
            (o, y) in (1usize..5, 1usize..5).prop_flat_map(|(m, d)| (matrix(m, d), matrix(m, d))),
            c in 0.01f64..100.0,
        ) {
            let a = contrastive_value(&o, &y, 0.1).unwrap();
            let scaled = Tensor::from_fn(o.shape(), |i| o.data()[i] * c);
            let b = contrastive_value(&scaled, &y, 0.1).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
