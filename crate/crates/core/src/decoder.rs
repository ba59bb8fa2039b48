//! Forward-only inference: batched encoder pass, per-sentence beam search
//! with n-best output, length normalization and attention-based unknown
//! word replacement.
//!
//! Search rules:
//! - every alive hypothesis is expanded over the full target vocabulary;
//!   the `beam_size` best candidates by cumulative log-probability survive,
//!   ties going to the lower token id, then the lower parent index;
//! - a surviving candidate that emits EOS moves to the finished pool;
//! - search stops once the finished pool holds `n_best` entries and its
//!   `n_best`-th adjusted score cannot be beaten by any alive hypothesis,
//!   when nothing is alive, or after `max_len` steps;
//! - hypotheses still alive after `max_len` steps get an EOS appended at no
//!   cost;
//! - final ranking uses `log_prob / len^alpha` (len counts EOS) when
//!   `length_alpha > 0`, else the raw log-probability. Normalization never
//!   affects pruning.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, encode_line, Side, SideVocabs, SourceBatch, Vocab, BOS, EOS, UNK_WORD};
use crate::model::{
    attention, decode_step, encode_sequence, generator_logprobs, DecoderState, ModelError, Seq2Seq,
};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("empty source")]
    EmptySource,
    #[error("line {0}: empty source")]
    EmptyLine(usize),
    #[error("invalid decode options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for DecodeError {
    fn from(e: crate::tensor::TensorError) -> Self {
        DecodeError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub n_best: usize,
    pub max_len: usize,
    pub length_alpha: f64,
    pub replace_unk: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: 5,
            n_best: 1,
            max_len: 100,
            length_alpha: 0.0,
            replace_unk: false,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidOptions("beam_size must be >= 1".into()));
        }
        if self.n_best == 0 || self.n_best > self.beam_size {
            return Err(DecodeError::InvalidOptions("n_best must be in 1..=beam_size".into()));
        }
        if self.max_len == 0 {
            return Err(DecodeError::InvalidOptions("max_len must be >= 1".into()));
        }
        if !(self.length_alpha >= 0.0) {
            return Err(DecodeError::InvalidOptions("length_alpha must be >= 0".into()));
        }
        Ok(())
    }

    /// Score used for final ranking.
    pub fn adjusted(&self, log_prob: f64, len: usize) -> f64 {
        if self.length_alpha > 0.0 {
            log_prob / (len as f64).powf(self.length_alpha)
        } else {
            log_prob
        }
    }
}

/// Recurrent decoder state as plain tensors, one row per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValues {
    pub layers: Vec<(Tensor, Tensor)>,
    pub input_feed: Tensor,
}

impl StateValues {
    fn rows(&self) -> usize {
        self.input_feed.rows()
    }

    fn row(&self, i: usize) -> Self {
        let pick = |t: &Tensor| Tensor::new(&[1, t.row_len()], t.row(i).to_vec()).expect("row shape");
        StateValues {
            layers: self.layers.iter().map(|(h, c)| (pick(h), pick(c))).collect(),
            input_feed: pick(&self.input_feed),
        }
    }

    fn stack(states: &[&StateValues]) -> Self {
        let cat = |parts: Vec<&Tensor>| {
            let w = parts[0].row_len();
            let data: Vec<Scalar> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(&[data.len() / w, w], data).expect("stack shape")
        };
        let nl = states[0].layers.len();
        StateValues {
            layers: (0..nl)
                .map(|l| {
                    (
                        cat(states.iter().map(|s| &s.layers[l].0).collect()),
                        cat(states.iter().map(|s| &s.layers[l].1).collect()),
                    )
                })
                .collect(),
            input_feed: cat(states.iter().map(|s| &s.input_feed).collect()),
        }
    }
}

/// Encoder output as plain tensors.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    /// `[B, S, rnn_size]`
    pub context: Tensor,
    pub init: StateValues,
    pub lengths: Vec<usize>,
}

impl EncodedSource {
    /// Context `[1, len, H]` and initial state of row `i`.
    pub fn sentence(&self, i: usize) -> (Tensor, StateValues) {
        let (s, h) = (self.context.shape()[1], self.context.shape()[2]);
        let len = self.lengths[i];
        let start = i * s * h;
        let ctx = Tensor::new(&[1, len, h], self.context.data()[start..start + len * h].to_vec())
            .expect("context shape");
        (ctx, self.init.row(i))
    }
}

/// One partial or finished output sequence.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: StateValues,
    /// Source position with the largest attention weight at each step.
    pub attn_argmax: Vec<usize>,
    pub finished: bool,
}

/// A ranked beam-search result.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Emitted ids, ending with exactly one EOS.
    pub tokens: Vec<usize>,
    /// Ranking score (length-adjusted when `length_alpha > 0`).
    pub score: f64,
    pub log_prob: f64,
    pub attn_argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BeamOutput {
    pub translations: Vec<Translation>,
    /// Number of (hypothesis, token) candidates scored.
    pub expansions: usize,
}

/// Forward-only engine over an immutable model.
#[derive(Clone, Copy)]
pub struct Engine<'m> {
    model: &'m Seq2Seq,
}

fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Seq2Seq) -> Self {
        Engine { model }
    }

    pub fn model(&self) -> &Seq2Seq {
        self.model
    }

    pub fn encode(&self, src: &SourceBatch) -> Result<EncodedSource> {
        if src.batch_size() == 0 || src.max_len() == 0 || src.lengths.contains(&0) {
            return Err(DecodeError::EmptySource);
        }
        let cfg = &self.model.config;
        let mut tape = Tape::inference();
        let vars = self.model.params.on_tape(&mut tape, cfg);
        let enc = encode_sequence(&mut tape, &vars, cfg, src, None)?;
        let layers = enc
            .finals
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect();
        Ok(EncodedSource {
            context: tape.value(enc.context).clone(),
            init: StateValues {
                layers,
                input_feed: Tensor::zeros(&[src.batch_size(), cfg.rnn_size])?,
            },
            lengths: enc.lengths,
        })
    }

    /// One decoder step for `k` hypotheses sharing a `[1, S, H]` context.
    /// Returns log-probabilities `[k, V]`, the new states and attention
    /// weights `[k, S]`.
    pub fn step(&self, y_prev: &[usize], state: &StateValues, context: &Tensor) -> Result<(Tensor, StateValues, Tensor)> {
        let cfg = &self.model.config;
        let k = y_prev.len();
        let (s, h) = (context.shape()[1], context.shape()[2]);
        let mut tape = Tape::inference();
        let vars = self.model.params.on_tape(&mut tape, cfg);
        let ctx = if k == 1 {
            tape.param(context)
        } else {
            let mut data = Vec::with_capacity(k * s * h);
            for _ in 0..k {
                data.extend_from_slice(context.data());
            }
            tape.constant(Tensor::new(&[k, s, h], data)?)
        };
        let layers = state
            .layers
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let input_feed = tape.constant(state.input_feed.clone());
        let st = DecoderState { layers, input_feed };
        let mask = vec![true; k * s];
        let out = decode_step(&mut tape, &vars, cfg, y_prev, &st, ctx, &mask, None)?;
        let lp = generator_logprobs(&mut tape, &vars, out.h_tilde)?;
        let new_state = StateValues {
            layers: out
                .state
                .layers
                .iter()
                .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
                .collect(),
            input_feed: tape.value(out.state.input_feed).clone(),
        };
        Ok((tape.value(lp).clone(), new_state, tape.value(out.attn).clone()))
    }

    /// Attention of a single query against a context, exposed for analysis.
    pub fn attend(&self, h_t: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let cfg = &self.model.config;
        let mut tape = Tape::inference();
        let vars = self.model.params.on_tape(&mut tape, cfg);
        let hv = tape.param(h_t);
        let cv = tape.param(context);
        let mask = vec![true; context.shape()[0] * context.shape()[1]];
        let (ht, w) = attention(&mut tape, &vars, hv, cv, &mask)?;
        Ok((tape.value(ht).clone(), tape.value(w).clone()))
    }

    /// Greedy argmax decoding (lowest id wins ties), force-finished at
    /// `max_len`.
    pub fn greedy(&self, context: &Tensor, init: &StateValues, max_len: usize) -> Result<Translation> {
        let mut tokens = Vec::new();
        let mut attn_argmax = Vec::new();
        let mut log_prob = 0.0;
        let mut state = init.clone();
        let mut prev = BOS;
        for _ in 0..max_len {
            let (lp, next, attn) = self.step(&[prev], &state, context)?;
            let best = argmax(lp.row(0));
            log_prob += lp.row(0)[best] as f64;
            tokens.push(best);
            attn_argmax.push(argmax(attn.row(0)));
            if best == EOS {
                break;
            }
            state = next;
            prev = best;
        }
        if tokens.last() != Some(&EOS) {
            tokens.push(EOS);
            attn_argmax.push(*attn_argmax.last().unwrap_or(&0));
        }
        Ok(Translation {
            tokens,
            score: log_prob,
            log_prob,
            attn_argmax,
        })
    }

    pub fn beam_search(&self, context: &Tensor, init: &StateValues, opts: &DecodeOptions) -> Result<BeamOutput> {
        opts.validate()?;
        if init.rows() != 1 {
            return Err(DecodeError::InvalidOptions("beam search runs one sentence at a time".into()));
        }
        let vocab = self.model.config.tgt_vocab_size;
        let mut alive = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: init.clone(),
            attn_argmax: Vec::new(),
            finished: false,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut expansions = 0;
        // Longest possible final length, EOS included.
        let longest = opts.max_len + 1;

        for _ in 0..opts.max_len {
            let y_prev: Vec<usize> = alive.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
            let states: Vec<&StateValues> = alive.iter().map(|h| &h.state).collect();
            let (lp, next, attn) = self.step(&y_prev, &StateValues::stack(&states), context)?;
            expansions += alive.len() * vocab;

            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * vocab);
            for (j, hyp) in alive.iter().enumerate() {
                for (v, &l) in lp.row(j).iter().enumerate() {
                    cands.push((hyp.log_prob + l as f64, v, j));
                }
            }
            let by_rank = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            };
            if cands.len() > opts.beam_size {
                cands.select_nth_unstable_by(opts.beam_size - 1, by_rank);
                cands.truncate(opts.beam_size);
            }
            cands.sort_by(by_rank);

            let mut next_alive = Vec::with_capacity(cands.len());
            for (score, v, j) in cands {
                let parent = &alive[j];
                let mut tokens = parent.tokens.clone();
                tokens.push(v);
                let mut attn_argmax = parent.attn_argmax.clone();
                attn_argmax.push(argmax(attn.row(j)));
                let hyp = Hypothesis {
                    tokens,
                    log_prob: score,
                    state: next.row(j),
                    attn_argmax,
                    finished: v == EOS,
                };
                if hyp.finished {
                    finished.push(hyp);
                } else {
                    next_alive.push(hyp);
                }
            }
            alive = next_alive;
            if alive.is_empty() {
                break;
            }
            if finished.len() >= opts.n_best {
                let mut scores: Vec<f64> = finished
                    .iter()
                    .map(|h| opts.adjusted(h.log_prob, h.tokens.len()))
                    .collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
                let threshold = scores[opts.n_best - 1];
                let bound = alive
                    .iter()
                    .map(|h| opts.adjusted(h.log_prob, longest))
                    .fold(f64::NEG_INFINITY, f64::max);
                if threshold >= bound {
                    break;
                }
            }
        }
        for mut hyp in alive {
            hyp.tokens.push(EOS);
            let last = *hyp.attn_argmax.last().unwrap_or(&0);
            hyp.attn_argmax.push(last);
            hyp.finished = true;
            finished.push(hyp);
        }
        let mut ranked: Vec<Translation> = finished
            .into_iter()
            .map(|h| Translation {
                score: opts.adjusted(h.log_prob, h.tokens.len()),
                log_prob: h.log_prob,
                tokens: h.tokens,
                attn_argmax: h.attn_argmax,
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        ranked.truncate(opts.n_best);
        Ok(BeamOutput {
            translations: ranked,
            expansions,
        })
    }
}

/// Beam search for a single encoded source example.
pub fn beam_search(model: &Seq2Seq, src: &data::Example, opts: &DecodeOptions) -> Result<BeamOutput> {
    if src.src_ids.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    let engine = Engine::new(model);
    let batch = SourceBatch::from_examples(&[src]);
    let enc = engine.encode(&batch)?;
    let (ctx, init) = enc.sentence(0);
    engine.beam_search(&ctx, &init, opts)
}

/// Greedy decoding for a single encoded source example.
pub fn greedy_decode(model: &Seq2Seq, src: &data::Example, max_len: usize) -> Result<Translation> {
    if src.src_ids.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    let engine = Engine::new(model);
    let enc = engine.encode(&SourceBatch::from_examples(&[src]))?;
    let (ctx, init) = enc.sentence(0);
    engine.greedy(&ctx, &init, max_len)
}

/// Replaces every UNK output token with the source word at that step's
/// attention argmax.
pub fn replace_unknowns(tokens: &[String], attn_argmax: &[usize], src_words: &[String]) -> Vec<String> {
    tokens
        .iter()
        .zip(attn_argmax)
        .map(|(tok, &pos)| match src_words.get(pos) {
            Some(src) if tok == UNK_WORD => src.clone(),
            _ => tok.clone(),
        })
        .collect()
}

/// One n-best entry of a translated line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

/// Translates raw lines: encode, one batched encoder pass, per-sentence
/// beam search, detokenize by single spaces without BOS/EOS. Output order
/// matches input order.
pub fn translate_batch(
    model: &Seq2Seq,
    lines: &[String],
    src_vocabs: &SideVocabs,
    tgt_vocab: &Vocab,
    separator: char,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Candidate>>> {
    opts.validate()?;
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    let mut encoded = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let e = encode_line(line, i + 1, src_vocabs, Side::Source, separator)?;
        if e.ids.is_empty() {
            return Err(DecodeError::EmptyLine(i + 1));
        }
        encoded.push(e);
    }
    let rows: Vec<(&[usize], &[Vec<usize>])> = encoded
        .iter()
        .map(|e| (e.ids.as_slice(), e.feat_ids.as_slice()))
        .collect();
    let engine = Engine::new(model);
    let enc = engine.encode(&SourceBatch::new(&rows))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, e) in encoded.iter().enumerate() {
        let (ctx, init) = enc.sentence(i);
        let beam = engine.beam_search(&ctx, &init, opts)?;
        let cands = beam
            .translations
            .into_iter()
            .map(|t| {
                let body = &t.tokens[..t.tokens.len() - 1];
                let mut words = tgt_vocab.decode(body);
                if opts.replace_unk {
                    words = replace_unknowns(&words, &t.attn_argmax, &e.words);
                }
                Candidate {
                    text: words.join(" "),
                    score: t.score,
                }
            })
            .collect();
        out.push(cands);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn replace_unknowns_cases() {
        let src = s(&["a", "b", "c"]);
        assert_eq!(replace_unknowns(&s(&["x", "y"]), &[0, 1], &src), s(&["x", "y"]));
        assert_eq!(replace_unknowns(&s(&[UNK_WORD]), &[2], &src), s(&["c"]));
        assert_eq!(
            replace_unknowns(&s(&[UNK_WORD, "k", UNK_WORD]), &[1, 0, 0], &src),
            s(&["b", "k", "a"])
        );
    }

    #[test]
    fn options_validation() {
        assert!(DecodeOptions::default().validate().is_ok());
        let bad = DecodeOptions {
            n_best: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodeOptions {
            beam_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn length_adjustment() {
        let o = DecodeOptions::default();
        assert_eq!(o.adjusted(-4.0, 4), -4.0);
        let o = DecodeOptions {
            length_alpha: 1.0,
            ..Default::default()
        };
        assert_eq!(o.adjusted(-4.0, 4), -1.0);
    }
}
