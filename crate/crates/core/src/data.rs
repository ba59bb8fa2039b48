//! Vocabularies, line encoding, padded batches and per-epoch sampling.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::epoch_rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const PAD_WORD: &str = "<blank>";
pub const UNK_WORD: &str = "<unk>";
pub const BOS_WORD: &str = "<s>";
pub const EOS_WORD: &str = "</s>";

const SPECIALS: [&str; 4] = [PAD_WORD, UNK_WORD, BOS_WORD, EOS_WORD];

/// U+FFE8 HALFWIDTH FORMS LIGHT VERTICAL.
pub const DEFAULT_FEATURE_SEPARATOR: char = '\u{FFE8}';

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size limit {0} is smaller than the 4 reserved tokens")]
    VocabTooSmall(usize),
    #[error("line {line}: token {token:?} has {found} feature fields, expected {expected}")]
    InconsistentFeatures {
        line: usize,
        token: String,
        found: usize,
        expected: usize,
    },
    #[error("sample fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Bidirectional token/id mapping. Ids 0..=3 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocab {
    pub fn specials_only() -> Self {
        let id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(DataError::InvalidVocab(
                "the first four tokens must be the reserved specials".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }

    fn push(&mut self, token: &str) {
        if !self.token_to_id.contains_key(token) {
            self.token_to_id.insert(token.to_string(), self.id_to_token.len());
            self.id_to_token.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<'s>(&self, tokens: impl IntoIterator<Item = &'s str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_WORD).to_string())
            .collect()
    }
}

/// Frequency counts with first-occurrence order, the input to vocabulary
/// selection.
#[derive(Debug, Default, Clone)]
pub struct TokenCounter {
    counts: HashMap<String, (usize, usize)>,
    seen: usize,
}

impl TokenCounter {
    pub fn add(&mut self, token: &str) {
        let order = self.seen;
        let entry = self.counts.entry(token.to_string()).or_insert((0, order));
        entry.0 += 1;
        self.seen += 1;
    }

    pub fn total(&self) -> usize {
        self.seen
    }

    /// Keeps tokens with count ≥ `min_freq`, most frequent first (ties by
    /// first occurrence), truncated so the whole vocabulary fits `max_size`.
    pub fn into_vocab(self, max_size: usize, min_freq: usize) -> Result<Vocab> {
        if max_size < SPECIALS.len() {
            return Err(DataError::VocabTooSmall(max_size));
        }
        let mut entries: Vec<(String, usize, usize)> = self
            .counts
            .into_iter()
            .filter(|(t, (c, _))| *c >= min_freq && !SPECIALS.contains(&t.as_str()))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut vocab = Vocab::specials_only();
        for (token, _, _) in entries.into_iter().take(max_size - SPECIALS.len()) {
            vocab.push(&token);
        }
        Ok(vocab)
    }
}

/// Builds a word vocabulary from whitespace-tokenized lines.
pub fn build_vocab<I, S>(corpus: I, max_size: usize, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counter = TokenCounter::default();
    for line in corpus {
        for tok in line.as_ref().split_ascii_whitespace() {
            counter.add(tok);
        }
    }
    if counter.total() == 0 {
        return Err(DataError::EmptyCorpus);
    }
    counter.into_vocab(max_size, min_freq)
}

/// Word vocabulary plus one vocabulary per feature stream.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SideVocabs {
    pub words: Vocab,
    pub features: Vec<Vocab>,
}

impl SideVocabs {
    pub fn num_features(&self) -> usize {
        self.features.len()
    }
}

/// Builds word and feature vocabularies for one corpus side in a single
/// pass. Every token must carry exactly `num_features` feature fields.
pub fn build_side_vocabs<I, S>(
    corpus: I,
    num_features: usize,
    separator: char,
    max_size: usize,
    min_freq: usize,
) -> Result<SideVocabs>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut words = TokenCounter::default();
    let mut feats = vec![TokenCounter::default(); num_features];
    for (lineno, line) in corpus.into_iter().enumerate() {
        for tok in line.as_ref().split_ascii_whitespace() {
            let (word, fields) = split_token(tok, num_features, separator, lineno + 1)?;
            words.add(word);
            for (c, f) in feats.iter_mut().zip(fields) {
                c.add(f);
            }
        }
    }
    if words.total() == 0 {
        return Err(DataError::EmptyCorpus);
    }
    Ok(SideVocabs {
        words: words.into_vocab(max_size, min_freq)?,
        features: feats
            .into_iter()
            .map(|c| c.into_vocab(max_size, 1))
            .collect::<Result<_>>()?,
    })
}

fn split_token(
    token: &str,
    num_features: usize,
    separator: char,
    line: usize,
) -> Result<(&str, Vec<&str>)> {
    if num_features == 0 {
        if token.contains(separator) {
            return Err(DataError::InconsistentFeatures {
                line,
                token: token.to_string(),
                found: token.split(separator).count() - 1,
                expected: 0,
            });
        }
        return Ok((token, Vec::new()));
    }
    let mut parts = token.split(separator);
    let word = parts.next().unwrap_or_default();
    let fields: Vec<&str> = parts.collect();
    if fields.len() != num_features {
        return Err(DataError::InconsistentFeatures {
            line,
            token: token.to_string(),
            found: fields.len(),
            expected: num_features,
        });
    }
    Ok((word, fields))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Ids for one encoded line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedLine {
    pub ids: Vec<usize>,
    pub feat_ids: Vec<Vec<usize>>,
    /// Surface words, kept for unknown-word replacement.
    pub words: Vec<String>,
}

/// Encodes one whitespace-tokenized line. `line_no` is 1-based and only
/// used in error reports. Target lines are wrapped in BOS/EOS.
pub fn encode_line(
    line: &str,
    line_no: usize,
    vocabs: &SideVocabs,
    side: Side,
    separator: char,
) -> Result<EncodedLine> {
    let nf = vocabs.num_features();
    let mut out = EncodedLine {
        feat_ids: vec![Vec::new(); nf],
        ..Default::default()
    };
    if side == Side::Target {
        out.ids.push(BOS);
    }
    for tok in line.split_ascii_whitespace() {
        let (word, fields) = split_token(tok, nf, separator, line_no)?;
        out.ids.push(vocabs.words.id(word));
        out.words.push(word.to_string());
        for ((stream, vocab), f) in out.feat_ids.iter_mut().zip(&vocabs.features).zip(fields) {
            stream.push(vocab.id(f));
        }
    }
    if side == Side::Target {
        out.ids.push(EOS);
    }
    Ok(out)
}

/// One parallel training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub src_feat_ids: Vec<Vec<usize>>,
    /// Bracketed by BOS and EOS.
    pub tgt_ids: Vec<usize>,
}

impl Example {
    pub fn src_len(&self) -> usize {
        self.src_ids.len()
    }
}

/// Encodes aligned source/target lines into examples, dropping pairs that
/// are empty or longer than the configured limits. Returns the examples and
/// the number of dropped pairs.
pub fn encode_corpus<S: AsRef<str>, T: AsRef<str>>(
    src_lines: &[S],
    tgt_lines: &[T],
    src_vocabs: &SideVocabs,
    tgt_vocabs: &SideVocabs,
    separator: char,
    max_src_len: usize,
    max_tgt_len: usize,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(src_lines.len());
    let mut dropped = 0;
    for (i, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
        let src = encode_line(s.as_ref(), i + 1, src_vocabs, Side::Source, separator)?;
        let tgt = encode_line(t.as_ref(), i + 1, tgt_vocabs, Side::Target, separator)?;
        let tgt_words = tgt.ids.len() - 2;
        if src.ids.is_empty() || tgt_words == 0 || src.ids.len() > max_src_len || tgt_words > max_tgt_len {
            dropped += 1;
            continue;
        }
        out.push(Example {
            src_ids: src.ids,
            src_feat_ids: src.feat_ids,
            tgt_ids: tgt.ids,
        });
    }
    Ok((out, dropped))
}

/// Row-major matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<usize>,
}

impl IdMatrix {
    pub fn filled(rows: usize, cols: usize, value: usize) -> Self {
        IdMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: usize) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` across all rows.
    pub fn column(&self, c: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Padded source side of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBatch {
    pub src: IdMatrix,
    pub lengths: Vec<usize>,
    pub feats: Vec<IdMatrix>,
}

impl SourceBatch {
    /// Pads `rows` (each: word ids, per-feature ids) to a common length.
    pub fn new(rows: &[(&[usize], &[Vec<usize>])]) -> Self {
        let max_len = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let nf = rows.first().map_or(0, |r| r.1.len());
        let mut src = IdMatrix::filled(rows.len(), max_len, PAD);
        let mut feats = vec![IdMatrix::filled(rows.len(), max_len, PAD); nf];
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, (ids, fids)) in rows.iter().enumerate() {
            lengths.push(ids.len());
            for (t, &id) in ids.iter().enumerate() {
                src.set(i, t, id);
            }
            for (m, stream) in feats.iter_mut().zip(fids.iter()) {
                for (t, &id) in stream.iter().enumerate() {
                    m.set(i, t, id);
                }
            }
        }
        SourceBatch { src, lengths, feats }
    }

    pub fn from_examples(examples: &[&Example]) -> Self {
        let rows: Vec<(&[usize], &[Vec<usize>])> = examples
            .iter()
            .map(|e| (e.src_ids.as_slice(), e.src_feat_ids.as_slice()))
            .collect();
        Self::new(&rows)
    }

    pub fn batch_size(&self) -> usize {
        self.src.rows
    }

    pub fn max_len(&self) -> usize {
        self.src.cols
    }
}

/// Padded training batch with teacher-forcing target matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Position of each row's example in the list given to `make_batches`.
    pub indices: Vec<usize>,
    pub source: SourceBatch,
    pub tgt_in: IdMatrix,
    pub tgt_out: IdMatrix,
    pub ntokens: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], indices: Vec<usize>) -> Self {
        let source = SourceBatch::from_examples(examples);
        let steps = examples.iter().map(|e| e.tgt_ids.len() - 1).max().unwrap_or(0);
        let mut tgt_in = IdMatrix::filled(examples.len(), steps, PAD);
        let mut tgt_out = IdMatrix::filled(examples.len(), steps, PAD);
        let mut ntokens = 0;
        for (i, e) in examples.iter().enumerate() {
            for t in 0..e.tgt_ids.len() - 1 {
                tgt_in.set(i, t, e.tgt_ids[t]);
                tgt_out.set(i, t, e.tgt_ids[t + 1]);
                ntokens += 1;
            }
        }
        Batch {
            indices,
            source,
            tgt_in,
            tgt_out,
            ntokens,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.indices.len()
    }

    pub fn target_steps(&self) -> usize {
        self.tgt_in.cols
    }
}

/// Sorts examples by source length, groups consecutive runs of at most
/// `batch_size` and shuffles the batch order with `rng`.
pub fn make_batches(examples: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].src_len(), i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&rows, chunk.to_vec())
        })
        .collect();
    batches.shuffle(rng);
    batches
}

/// Uniform sample without replacement of ⌈fraction·N⌉ examples, drawn from
/// the generator for `(seed, epoch)`.
pub fn sample_dataset(examples: &[Example], fraction: f64, seed: u64, epoch: usize) -> Result<Vec<Example>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::FractionOutOfRange(fraction));
    }
    let n = examples.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = epoch_rng(seed, epoch, crate::rng::Stream::Sample);
    let picked = rand::seq::index::sample(&mut rng, n, k);
    Ok(picked.into_iter().map(|i| examples[i].clone()).collect())
}
