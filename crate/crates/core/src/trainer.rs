//! Plain SGD training with global-norm clipping, learning-rate decay,
//! per-epoch data sampling and perplexity evaluation.


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, sample_dataset, DataError, Example};
use crate::model::{Dropout, ModelError, ModelParams, Seq2Seq};
use crate::rng::{epoch_rng, seeded, Stream};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {key}: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gradient list does not match parameters: {0}")]
    GradientMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint callback failed: {0}")]
    Callback(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    /// 1-based epoch from which every epoch decays the learning rate.
    pub start_decay_at: usize,
    pub max_grad_norm: f64,
    pub sample_fraction: f64,
    pub rng_seed: u64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 13,
            batch_size: 64,
            learning_rate: 1.0,
            decay_rate: 0.5,
            start_decay_at: 9,
            max_grad_norm: 5.0,
            sample_fraction: 1.0,
            rng_seed: 3435,
            dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key, reason: &str| {
            Err(TrainError::InvalidConfig {
                key,
                reason: reason.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate", "must be in (0, 1]");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", "must be > 0");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction", "must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }
}

/// Progress carried across epochs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs (epochs are numbered from 1).
    pub epoch: usize,
    pub learning_rate: f64,
    pub valid_ppl: Vec<f64>,
    pub best_valid_ppl: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            learning_rate: cfg.learning_rate,
            valid_ppl: Vec::new(),
            best_valid_ppl: None,
        }
    }
}

/// Summed NLL of `targets` under row log-probabilities and the number of
/// non-pad targets.
pub fn nll_loss(logprobs: &Tensor, targets: &[usize], pad_id: usize) -> Result<(f64, usize)> {
    let mut tape = Tape::inference();
    let lp = tape.param(logprobs);
    let loss = tape.nll_loss(lp, targets, pad_id)?;
    let ntokens = targets.iter().filter(|&&t| t != pad_id).count();
    Ok((tape.value(loss).data()[0] as f64, ntokens))
}

/// Global L2 norm over all gradient slots.
pub fn global_grad_norm(params: &ModelParams) -> f64 {
    params
        .tensors
        .iter()
        .filter_map(|t| t.grad.as_ref())
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(params: &mut ModelParams, max_norm: f64) -> Result<f64> {
    for (name, t) in params.names.iter().zip(&params.tensors) {
        if t.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let s = (max_norm / norm) as Scalar;
        for g in params.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// One SGD step over the gradients held in each parameter's grad slot
/// (already normalized by the caller): clip to `max_grad_norm`, apply
/// θ ← θ − lr·g, then zero the gradients. Nothing is updated when any
/// gradient is non-finite.
pub fn sgd_update(params: &mut ModelParams, learning_rate: f64, max_grad_norm: f64) -> Result<f64> {
    if let Some(i) = params.tensors.iter().position(|t| t.grad.is_none()) {
        return Err(TrainError::GradientMismatch(format!("{} has no gradient", params.names[i])));
    }
    let norm = clip_gradients(params, max_grad_norm)?;
    let lr = learning_rate as Scalar;
    for t in &mut params.tensors {
        let g = t.grad.take().expect("checked above");
        for (w, gv) in t.data_mut().iter_mut().zip(&g) {
            *w -= lr * gv;
        }
        t.grad = Some(g);
        t.zero_grad();
    }
    Ok(norm)
}

/// Moves freshly computed gradients into the parameters' grad slots.
pub fn set_gradients(params: &mut ModelParams, grads: Vec<Vec<Scalar>>) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(TrainError::GradientMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    for ((t, g), name) in params.tensors.iter_mut().zip(grads).zip(&params.names) {
        if g.len() != t.numel() {
            return Err(TrainError::GradientMismatch(name.clone()));
        }
        t.grad = Some(g);
    }
    Ok(())
}

/// Learning rate for the next epoch: decays once when the completed epoch
/// reached `start_decay_at` or validation perplexity got worse.
pub fn update_learning_rate(state: &TrainState, cfg: &TrainConfig) -> f64 {
    let past_start = state.epoch >= cfg.start_decay_at;
    let worse = match state.valid_ppl.as_slice() {
        [.., prev, last] => last > prev,
        _ => false,
    };
    if past_start || worse {
        state.learning_rate * cfg.decay_rate
    } else {
        state.learning_rate
    }
}

/// exp(Σ NLL / Σ tokens) over the dataset, without dropout.
pub fn evaluate_perplexity(model: &Seq2Seq, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = seeded(0);
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut batches = make_batches(examples, batch_size, &mut rng);
    batches.sort_by_key(|b| b.indices[0]);
    for batch in &batches {
        let (loss, n) = model.batch_loss(batch)?;
        total += loss;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok((total / tokens as f64).exp())
}

/// Per-epoch summary; the log line is tab-separated
/// `epoch train_ppl valid_ppl lr tokens_per_sec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    /// Learning rate used during the epoch.
    pub learning_rate: f64,
    pub tokens_per_sec: f64,
}

impl EpochReport {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.1}",
            self.epoch, self.train_ppl, self.valid_ppl, self.learning_rate, self.tokens_per_sec
        )
    }
}

/// Wall clock for throughput logging; wasm32 has no std clock, so it
/// reports nothing there.
mod clock {
    #[cfg(not(target_arch = "wasm32"))]
    pub type Mark = std::time::Instant;
    #[cfg(target_arch = "wasm32")]
    pub type Mark = ();

    #[cfg(not(target_arch = "wasm32"))]
    pub fn start() -> Mark {
        std::time::Instant::now()
    }
    #[cfg(target_arch = "wasm32")]
    pub fn start() -> Mark {}

    #[cfg(not(target_arch = "wasm32"))]
    pub fn seconds_since(m: Mark) -> Option<f64> {
        Some(m.elapsed().as_secs_f64())
    }
    #[cfg(target_arch = "wasm32")]
    pub fn seconds_since(_: Mark) -> Option<f64> {
        None
    }
}

/// Runs one epoch of SGD over a sampled, batched copy of `train`.
pub fn train_epoch(model: &mut Seq2Seq, train: &[Example], cfg: &TrainConfig, epoch: usize, learning_rate: f64) -> Result<(f64, usize)> {
    let sampled = sample_dataset(train, cfg.sample_fraction, cfg.rng_seed, epoch)?;
    let mut batch_rng = epoch_rng(cfg.rng_seed, epoch, Stream::Batch);
    let batches = make_batches(&sampled, cfg.batch_size, &mut batch_rng);
    let mut dropout = Dropout::with_rng(cfg.dropout, epoch_rng(cfg.rng_seed, epoch, Stream::Dropout));
    let mut total_loss = 0.0;
    let mut total_tokens = 0;
    for (b, batch) in batches.iter().enumerate() {
        let d = (cfg.dropout > 0.0).then_some(&mut dropout);
        let (loss, ntok, grads) = model.loss_and_grads(batch, d)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
        }
        set_gradients(&mut model.params, grads)?;
        sgd_update(&mut model.params, learning_rate, cfg.max_grad_norm)?;
        total_loss += loss;
        total_tokens += ntok;
    }
    Ok((total_loss, total_tokens))
}

/// Trains from `state.epoch + 1` through `cfg.epochs`, calling `on_epoch`
/// after each epoch (checkpointing happens there).
pub fn train<F>(
    model: &mut Seq2Seq,
    train_set: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&Seq2Seq, &TrainState, &EpochReport) -> std::result::Result<(), String>,
{
    cfg.validate()?;
    if train_set.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for epoch in state.epoch + 1..=cfg.epochs {
        let start = clock::start();
        let lr = state.learning_rate;
        let (loss, tokens) = train_epoch(model, train_set, cfg, epoch, lr)?;
        let elapsed = clock::seconds_since(start);
        let valid_ppl = evaluate_perplexity(model, valid, cfg.batch_size)?;
        state.epoch = epoch;
        state.valid_ppl.push(valid_ppl);
        state.best_valid_ppl = Some(state.best_valid_ppl.map_or(valid_ppl, |b| b.min(valid_ppl)));
        state.learning_rate = update_learning_rate(&state, cfg);
        let report = EpochReport {
            epoch,
            train_ppl: (loss / tokens.max(1) as f64).exp(),
            valid_ppl,
            learning_rate: lr,
            tokens_per_sec: elapsed.map_or(0.0, |e| tokens as f64 / e.max(1e-9)),
        };
        log::info!("{}", report.log_line());
        on_epoch(model, &state, &report).map_err(TrainError::Callback)?;
    }
    Ok(state)
}
