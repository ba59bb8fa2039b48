//! Browser demo: train a small attentional model to reverse letter
//! sequences, then look at its attention and beam search.
//!
//! All exported methods return JSON strings.

use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use seqforge::data::{build_vocab, Batch, Example, Vocab, BOS, EOS};
use seqforge::decoder::{self, DecodeOptions};
use seqforge::model::{self, ModelConfig, Seq2Seq};
use seqforge::rng::seeded;
use seqforge::trainer::{self, TrainConfig, TrainState};
use seqforge::Tape;

const LETTERS: &str = "a b c d e f g h";

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub learning_rate: f64,
    /// Share of validation inputs whose greedy output is exactly reversed.
    pub exact_match: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Scored {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TranslateView {
    pub source: Vec<String>,
    /// Best output, `</s>` included.
    pub output: Vec<String>,
    /// `attention[j][i]`: weight of source `i` when emitting output `j`.
    pub attention: Vec<Vec<f64>>,
    pub candidates: Vec<Scored>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub beam_size: usize,
    pub text: String,
    pub score: f64,
    pub expansions: usize,
}

/// Model, data and training progress for the reversal task.
pub struct DemoCore {
    vocab: Vocab,
    model: Seq2Seq,
    train_set: Vec<Example>,
    valid: Vec<Example>,
    cfg: TrainConfig,
    state: TrainState,
}

fn reversal_examples(vocab: &Vocab, n: usize, seed: u64) -> Vec<Example> {
    let letters: Vec<usize> = LETTERS.split(' ').map(|w| vocab.id(w)).collect();
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=7);
            let src: Vec<usize> = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
            let mut tgt_ids = vec![BOS];
            tgt_ids.extend(src.iter().rev());
            tgt_ids.push(EOS);
            Example {
                src_ids: src,
                src_feat_ids: vec![],
                tgt_ids,
            }
        })
        .collect()
}

impl DemoCore {
    pub fn new(seed: u64) -> DemoCore {
        let vocab = build_vocab([LETTERS], 64, 1).expect("letters form a vocabulary");
        let mcfg = ModelConfig {
            layers: 1,
            rnn_size: 64,
            word_vec_size: 32,
            feat_vec_size: 1,
            num_features: 0,
            feat_vocab_sizes: vec![],
            bidirectional: true,
            residual: false,
            input_feed: true,
            dropout: 0.0,
            src_vocab_size: vocab.len(),
            tgt_vocab_size: vocab.len(),
        };
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            learning_rate: 1.0,
            decay_rate: 0.8,
            start_decay_at: 15,
            dropout: 0.0,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        DemoCore {
            model: Seq2Seq::new(mcfg, seed).expect("valid config"),
            train_set: reversal_examples(&vocab, 2000, seed.wrapping_add(1)),
            valid: reversal_examples(&vocab, 60, seed.wrapping_add(2)),
            state: TrainState::new(&cfg),
            cfg,
            vocab,
        }
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn train_epoch(&mut self) -> Result<EpochSummary, String> {
        let cfg = TrainConfig {
            epochs: self.state.epoch + 1,
            ..self.cfg.clone()
        };
        let mut report = None;
        self.state = trainer::train(&mut self.model, &self.train_set, &self.valid, &cfg, self.state.clone(), |_, _, r| {
            report = Some(r.clone());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let r = report.expect("one epoch ran");
        Ok(EpochSummary {
            epoch: r.epoch,
            train_ppl: r.train_ppl,
            valid_ppl: r.valid_ppl,
            learning_rate: r.learning_rate,
            exact_match: self.exact_match()?,
        })
    }

    fn exact_match(&self) -> Result<f64, String> {
        let mut hits = 0;
        for ex in &self.valid {
            let out = decoder::greedy_decode(&self.model, ex, 12).map_err(|e| e.to_string())?;
            hits += usize::from(out.tokens[..] == ex.tgt_ids[1..]);
        }
        Ok(hits as f64 / self.valid.len() as f64)
    }

    fn source(&self, text: &str) -> Result<(Vec<String>, Example), String> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err("empty source".into());
        }
        let ids = self.vocab.encode(words.iter().map(String::as_str));
        Ok((
            words,
            Example {
                src_ids: ids,
                src_feat_ids: vec![],
                tgt_ids: vec![BOS, EOS],
            },
        ))
    }

    /// Attention rows for a fixed output sequence, by teacher forcing it.
    fn attention_for(&self, src: &Example, output: &[usize]) -> Result<Vec<Vec<f64>>, String> {
        let mut tgt_ids = vec![BOS];
        tgt_ids.extend_from_slice(output);
        let ex = Example {
            tgt_ids,
            ..src.clone()
        };
        let batch = Batch::from_examples(&[&ex], vec![0]);
        let mut tape = Tape::inference();
        let vars = self.model.params.on_tape(&mut tape, &self.model.config);
        let out = model::forward_loss(&mut tape, &vars, &self.model.config, &batch, None).map_err(|e| e.to_string())?;
        Ok(out
            .attention
            .iter()
            .map(|&a| tape.value(a).row(0).iter().map(|&w| w as f64).collect())
            .collect())
    }

    pub fn translate(&self, text: &str, beam_size: usize, n_best: usize) -> Result<TranslateView, String> {
        let (words, src) = self.source(text)?;
        let opts = DecodeOptions {
            beam_size: beam_size.max(1),
            n_best: n_best.clamp(1, beam_size.max(1)),
            max_len: 2 * words.len() + 4,
            ..DecodeOptions::default()
        };
        let out = decoder::beam_search(&self.model, &src, &opts).map_err(|e| e.to_string())?;
        let best = &out.translations[0];
        let attention = self.attention_for(&src, &best.tokens)?;
        let text_of = |toks: &[usize]| self.vocab.decode(&toks[..toks.len() - 1]).join(" ");
        Ok(TranslateView {
            source: words,
            output: self.vocab.decode(&best.tokens),
            attention,
            candidates: out
                .translations
                .iter()
                .map(|t| Scored {
                    text: text_of(&t.tokens),
                    score: t.score,
                })
                .collect(),
        })
    }

    pub fn beam_sweep(&self, text: &str, max_beam: usize) -> Result<Vec<SweepRow>, String> {
        let (words, src) = self.source(text)?;
        (1..=max_beam.clamp(1, 32))
            .map(|k| {
                let opts = DecodeOptions {
                    beam_size: k,
                    max_len: 2 * words.len() + 4,
                    ..DecodeOptions::default()
                };
                let out = decoder::beam_search(&self.model, &src, &opts).map_err(|e| e.to_string())?;
                let t = &out.translations[0];
                Ok(SweepRow {
                    beam_size: k,
                    text: self.vocab.decode(&t.tokens[..t.tokens.len() - 1]).join(" "),
                    score: t.score,
                    expansions: out.expansions,
                })
            })
            .collect()
    }
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct Demo {
    core: DemoCore,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Demo {
        Demo {
            core: DemoCore::new(seed as u64),
        }
    }

    pub fn epoch(&self) -> usize {
        self.core.epoch()
    }

    /// One SGD epoch over the reversal corpus.
    pub fn train_epoch(&mut self) -> Result<String, JsValue> {
        to_json(self.core.train_epoch())
    }

    /// Beam search with the attention matrix of the best output.
    pub fn translate(&self, src: &str, beam_size: usize, n_best: usize) -> Result<String, JsValue> {
        to_json(self.core.translate(src, beam_size, n_best))
    }

    /// Top-1 output and expansion count for every beam size up to `max_beam`.
    pub fn beam_sweep(&self, src: &str, max_beam: usize) -> Result<String, JsValue> {
        to_json(self.core.beam_sweep(src, max_beam))
    }
}
