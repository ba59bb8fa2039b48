mod common;

use common::*;
use seqforge::data::{Example, PAD};
use seqforge::model::Seq2Seq;
use seqforge::rng::seeded;
use seqforge::trainer::{self, TrainConfig, TrainState};

/// exp(mean NLL) from per-sentence scalar log-probabilities.
fn perplexity_oracle(model: &Seq2Seq, exs: &[Example]) -> f64 {
    let mut nll = 0.0;
    let mut n = 0;
    for ex in exs {
        let (loss, tokens) = model.batch_loss(&batch_of(std::slice::from_ref(ex))).unwrap();
        nll += loss;
        n += tokens;
    }
    (nll / n as f64).exp()
}

#[test]
fn perplexity_matches_per_sentence_oracle_and_ignores_batch_size() {
    let cfg = tiny_config();
    let mut model = Seq2Seq::new(cfg.clone(), 8).unwrap();
    widen(&mut model, 0.7, 3);
    let mut rng = seeded(4);
    let exs: Vec<Example> = (0..2).map(|_| random_example(&mut rng, &cfg, 6)).collect();
    let want = perplexity_oracle(&model, &exs);
    for b in [1, 2, 16] {
        let got = trainer::evaluate_perplexity(&model, &exs, b).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "batch {b}: {got} vs {want}");
    }
}

#[test]
fn small_sgd_step_decreases_loss() {
    let (mut model, batch) = tiny_batch(11);
    let (before, n) = model.batch_loss(&batch).unwrap();
    let (_, _, grads) = model.loss_and_grads(&batch, None).unwrap();
    trainer::set_gradients(&mut model.params, grads).unwrap();
    trainer::sgd_update(&mut model.params, 1e-3, 1e9).unwrap();
    let (after, _) = model.batch_loss(&batch).unwrap();
    assert!(after / (n as f64) < before / (n as f64), "{after} !< {before}");
}

#[test]
fn clipping_preserves_direction() {
    let (mut model, batch) = tiny_batch(12);
    let (_, _, grads) = model.loss_and_grads(&batch, None).unwrap();
    let flat: Vec<f64> = grads.iter().flatten().map(|&g| g as f64).collect();
    trainer::set_gradients(&mut model.params, grads).unwrap();
    let norm = trainer::global_grad_norm(&model.params);
    let max = norm / 3.0;
    trainer::clip_gradients(&mut model.params, max).unwrap();
    let clipped: Vec<f64> = model
        .params
        .tensors
        .iter()
        .flat_map(|t| t.grad.clone().unwrap())
        .map(|g| g as f64)
        .collect();
    let post = trainer::global_grad_norm(&model.params);
    assert!(post <= max + 1e-9);
    let dot: f64 = flat.iter().zip(&clipped).map(|(a, b)| a * b).sum();
    let cos = dot / (norm * post);
    assert!((cos - 1.0).abs() < 1e-12, "cosine {cos}");
}

fn tiny_task(seed: u64) -> (Vec<Example>, Vec<Example>) {
    let cfg = tiny_config();
    let mut rng = seeded(seed);
    let all: Vec<Example> = (0..40).map(|_| random_example(&mut rng, &cfg, 5)).collect();
    (all[..32].to_vec(), all[32..].to_vec())
}

#[test]
fn zero_epochs_runs_nothing() {
    let (train_set, valid) = tiny_task(1);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let mut model = Seq2Seq::new(tiny_config(), 1).unwrap();
    let before = model.clone();
    let mut calls = 0;
    let state = trainer::train(&mut model, &train_set, &valid, &cfg, TrainState::new(&cfg), |_, _, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!((calls, state.epoch), (0, 0));
    assert_eq!(model, before);
}

#[test]
fn learning_rate_never_increases_and_resume_matches() {
    let (train_set, valid) = tiny_task(2);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        start_decay_at: 3,
        sample_fraction: 0.5,
        dropout: 0.3,
        ..TrainConfig::default()
    };
    let mut mcfg = tiny_config();
    mcfg.dropout = 0.3;
    let mut straight = Seq2Seq::new(mcfg.clone(), 2).unwrap();
    let mut lrs = Vec::new();
    let end = trainer::train(&mut straight, &train_set, &valid, &cfg, TrainState::new(&cfg), |_, _, r| {
        lrs.push(r.learning_rate);
        Ok(())
    })
    .unwrap();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(end.learning_rate < cfg.learning_rate);

    for k in 1..5 {
        let mut model = Seq2Seq::new(mcfg.clone(), 2).unwrap();
        let head = TrainConfig { epochs: k, ..cfg.clone() };
        let mid = trainer::train(&mut model, &train_set, &valid, &head, TrainState::new(&head), |_, _, _| Ok(())).unwrap();
        let tail = trainer::train(&mut model, &train_set, &valid, &cfg, mid, |_, _, _| Ok(())).unwrap();
        assert_eq!(model, straight, "split after {k}");
        assert_eq!(tail, end);
    }
}

#[test]
fn pad_targets_do_not_count() {
    let cfg = tiny_config();
    let model = Seq2Seq::new(cfg.clone(), 3).unwrap();
    let mut rng = seeded(6);
    let exs: Vec<Example> = (0..5).map(|_| random_example(&mut rng, &cfg, 6)).collect();
    let batch = batch_of(&exs);
    let pads = batch.tgt_out.data.iter().filter(|&&t| t == PAD).count();
    assert_eq!(batch.ntokens + pads, batch.tgt_out.data.len());
    let (_, n) = model.batch_loss(&batch).unwrap();
    assert_eq!(n, batch.ntokens);
}
