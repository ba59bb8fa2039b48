#![allow(dead_code)]

use rand::Rng;
use seqforge::data::{Batch, Example, BOS, EOS};
use seqforge::model::{ModelConfig, Seq2Seq};
use seqforge::rng::seeded;
use seqforge::Scalar;

/// 2 layers, rnn_size 4, bidirectional, input feed, residual, one word
/// feature, vocab 11.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        rnn_size: 4,
        word_vec_size: 3,
        feat_vec_size: 2,
        num_features: 1,
        feat_vocab_sizes: vec![6],
        bidirectional: true,
        residual: true,
        input_feed: true,
        dropout: 0.0,
        src_vocab_size: 11,
        tgt_vocab_size: 11,
    }
}

pub fn random_example(rng: &mut impl Rng, cfg: &ModelConfig, max_len: usize) -> Example {
    let n = rng.gen_range(1..=max_len);
    let m = rng.gen_range(1..=max_len);
    let src_ids = (0..n).map(|_| rng.gen_range(4..cfg.src_vocab_size)).collect();
    let src_feat_ids = cfg
        .feat_vocab_sizes
        .iter()
        .map(|&v| (0..n).map(|_| rng.gen_range(4..v)).collect())
        .collect();
    let mut tgt_ids = vec![BOS];
    tgt_ids.extend((0..m).map(|_| rng.gen_range(4..cfg.tgt_vocab_size)));
    tgt_ids.push(EOS);
    Example {
        src_ids,
        src_feat_ids,
        tgt_ids,
    }
}

pub fn batch_of(examples: &[Example]) -> Batch {
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs, (0..examples.len()).collect())
}

/// Central finite-difference gradient of `loss/ntokens` for every
/// parameter entry.
pub fn finite_difference_grads(model: &Seq2Seq, batch: &Batch, eps: f64) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::new();
    for ti in 0..probe.params.tensors.len() {
        let mut g = Vec::with_capacity(probe.params.tensors[ti].numel());
        for k in 0..probe.params.tensors[ti].numel() {
            let orig = probe.params.tensors[ti].data()[k];
            probe.params.tensors[ti].data_mut()[k] = orig + eps as Scalar;
            let (plus, n) = probe.batch_loss(batch).unwrap();
            probe.params.tensors[ti].data_mut()[k] = orig - eps as Scalar;
            let (minus, _) = probe.batch_loss(batch).unwrap();
            probe.params.tensors[ti].data_mut()[k] = orig;
            g.push((plus - minus) / (2.0 * eps) / n as f64);
        }
        out.push(g);
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Replaces every parameter with a draw from uniform(−scale, scale).
pub fn widen(model: &mut Seq2Seq, scale: f64, seed: u64) {
    let mut rng = seeded(seed);
    for t in &mut model.params.tensors {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale) as Scalar;
        }
    }
}

/// Tiny model with parameters in ±0.5 (the ±0.1 default leaves some
/// gradients below finite-difference resolution) and a 3-sentence batch.
pub fn tiny_batch(seed: u64) -> (Seq2Seq, Batch) {
    let cfg = tiny_config();
    let mut model = Seq2Seq::new(cfg.clone(), seed).unwrap();
    widen(&mut model, 0.5, seed + 7);
    let mut rng = seeded(seed + 100);
    let ex: Vec<Example> = (0..3).map(|_| random_example(&mut rng, &cfg, 5)).collect();
    (model, batch_of(&ex))
}
