//! Short training runs: text reconstruction and single-utterance overfit.

use lanat_core::autograd::Tape;
use lanat_core::data::{generate_corpus, SyntheticSpec};
use lanat_core::model::{LaNat, LaNatConfig};
use lanat_core::nn::Ctx;
use lanat_core::trainer::{run_stages, train_stage, StagePlan, TrainConfig, TrainingData};

#[test]
fn text_pretraining_learns_to_reconstruct() {
    let spec = SyntheticSpec {
        train_size: 0,
        test_size: 0,
        text_size: 50,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let mut model = LaNat::new(LaNatConfig::desk(), 3).unwrap();
    let train = TrainConfig::default();
    let data = TrainingData { speech: &[], text: &corpus.text };
    let report = train_stage(&mut model, &StagePlan::text_pretrain(200), data, &train, 3).unwrap();

    let ce: Vec<f64> = report.curve.iter().filter(|r| r.loss == "ce_text").map(|r| r.value).collect();
    assert_eq!(ce.len(), 200);
    let bound = (spec.vocab_size as f64).ln() / 4.0;
    assert!(ce.iter().any(|&v| v < bound), "final {}", ce[199]);

    let (mut hit, mut total) = (0, 0);
    for s in &corpus.text {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, model.params());
        let out = model.forward_text(&ctx, s).unwrap();
        let pred = out.recon_logits.value().argmax_rows();
        hit += pred.iter().zip(s).filter(|(a, b)| a == b).count();
        total += s.len();
    }
    assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");
}

#[test]
fn overfit_single_utterance_decodes_exactly() {
    let spec = SyntheticSpec {
        vocab_size: 4,
        feature_dim: 6,
        min_tokens: 1,
        max_tokens: 3,
        train_size: 1,
        test_size: 0,
        text_size: 0,
        seed: 1,
        ..SyntheticSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = LaNatConfig {
        model_dim: 16,
        ffn_dim: 32,
        conv_channels: 4,
        ..LaNatConfig::toy()
    };
    let mut model = LaNat::new(cfg, 1).unwrap();
    let train = TrainConfig {
        warmup_steps: 30,
        average_last: 1,
        ..TrainConfig::default()
    };
    let data = TrainingData { speech: &corpus.train, text: &[] };
    let report = run_stages(&mut model, &[StagePlan::scratch(300)], data, &train, 1).unwrap();
    let trained = report.checkpoint.to_model().unwrap();
    let u = &corpus.train[0];
    assert_eq!(trained.decode_nar(&u.frames).unwrap(), u.tokens);
    assert_eq!(trained.decode_ctc(&u.frames).unwrap(), u.tokens);
}
