//! Attentional encoder-decoder: feature-augmented embeddings, a stacked
//! (optionally bidirectional, optionally residual) LSTM encoder, an
//! input-feeding LSTM decoder with global "general" attention, and a
//! log-softmax generator.
//!
//! Cell: i, f, o = σ(·), g = tanh(·) over `x·W_ih + h·W_hh + b` (gate
//! order i, f, o, g); c' = f⊙c + i⊙g; h' = o⊙tanh(c').
//! Attention: score(h_t, h_s) = h_tᵀ W_a h_s, a = masked softmax over
//! source positions, c_t = Σ a_s h_s, h̃ = tanh(W_c [c_t; h_t]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, IdMatrix, SourceBatch};
use crate::rng::{seeded, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {key}: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("batch does not match model: {0}")]
    Mismatch(String),
    #[error("empty source")]
    EmptySource,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_true() -> bool {
    true
}

/// Hyperparameters that fix every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub rnn_size: usize,
    pub word_vec_size: usize,
    #[serde(default)]
    pub feat_vec_size: usize,
    #[serde(default)]
    pub num_features: usize,
    /// Vocabulary size of each source feature stream.
    #[serde(default)]
    pub feat_vocab_sizes: Vec<usize>,
    #[serde(default)]
    pub bidirectional: bool,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_true")]
    pub input_feed: bool,
    #[serde(default)]
    pub dropout: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            rnn_size: 500,
            word_vec_size: 500,
            feat_vec_size: 5,
            num_features: 0,
            feat_vocab_sizes: vec![],
            bidirectional: false,
            residual: false,
            input_feed: true,
            dropout: 0.3,
            src_vocab_size: 4,
            tgt_vocab_size: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("rnn_size", self.rnn_size),
            ("word_vec_size", self.word_vec_size),
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig {
                    key,
                    reason: "must be >= 1".into(),
                });
            }
        }
        if self.bidirectional && self.rnn_size % 2 != 0 {
            return Err(ModelError::InvalidConfig {
                key: "rnn_size",
                reason: "must be even for a bidirectional encoder".into(),
            });
        }
        if self.num_features > 0 && self.feat_vec_size == 0 {
            return Err(ModelError::InvalidConfig {
                key: "feat_vec_size",
                reason: "must be >= 1 when features are enabled".into(),
            });
        }
        if self.feat_vocab_sizes.len() != self.num_features || self.feat_vocab_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig {
                key: "feat_vocab_sizes",
                reason: format!("need {} positive sizes", self.num_features),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig {
                key: "dropout",
                reason: "must be in [0, 1)".into(),
            });
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Hidden width of one encoder direction.
    pub fn encoder_width(&self) -> usize {
        self.rnn_size / self.directions()
    }

    pub fn embedding_dim(&self) -> usize {
        self.word_vec_size + self.num_features * self.feat_vec_size
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.word_vec_size + if self.input_feed { self.rnn_size } else { 0 }
    }

    /// Ordered (name, shape) list of every parameter tensor.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push(("src_emb".to_string(), vec![self.src_vocab_size, self.word_vec_size]));
        for (k, &v) in self.feat_vocab_sizes.iter().enumerate() {
            out.push((format!("src_feat_emb.{k}"), vec![v, self.feat_vec_size]));
        }
        out.push(("tgt_emb".to_string(), vec![self.tgt_vocab_size, self.word_vec_size]));
        let hd = self.encoder_width();
        for l in 0..self.layers {
            let input = if l == 0 { self.embedding_dim() } else { self.rnn_size };
            for dir in DIRECTION_NAMES.iter().take(self.directions()) {
                let p = format!("enc.l{l}.{dir}");
                out.push((format!("{p}.w_ih"), vec![input, 4 * hd]));
                out.push((format!("{p}.w_hh"), vec![hd, 4 * hd]));
                out.push((format!("{p}.bias"), vec![4 * hd]));
            }
        }
        let h = self.rnn_size;
        for l in 0..self.layers {
            let input = if l == 0 { self.decoder_input_dim() } else { h };
            out.push((format!("dec.l{l}.w_ih"), vec![input, 4 * h]));
            out.push((format!("dec.l{l}.w_hh"), vec![h, 4 * h]));
            out.push((format!("dec.l{l}.bias"), vec![4 * h]));
        }
        out.push(("attn.w_a".to_string(), vec![h, h]));
        out.push(("attn.w_c".to_string(), vec![h, 2 * h]));
        out.push(("generator.weight".to_string(), vec![self.tgt_vocab_size, h]));
        out.push(("generator.bias".to_string(), vec![self.tgt_vocab_size]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const DIRECTION_NAMES: [&str; 2] = ["fwd", "bwd"];

/// Input weights, recurrent weights and bias of one LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmSlots<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub bias: T,
}

/// Positions of the parameters in manifest order, generic over the handle.
#[derive(Debug, Clone)]
pub struct Layout<T> {
    pub src_emb: T,
    pub feat_embs: Vec<T>,
    pub tgt_emb: T,
    /// `[layer][direction]`
    pub encoder: Vec<Vec<LstmSlots<T>>>,
    pub decoder: Vec<LstmSlots<T>>,
    pub w_a: T,
    pub w_c: T,
    pub gen_w: T,
    pub gen_b: T,
}

impl Layout<usize> {
    /// Mirrors the enumeration order of [`ModelConfig::manifest`].
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let src_emb = take();
        let feat_embs = (0..cfg.num_features).map(|_| take()).collect();
        let tgt_emb = take();
        let mut lstm = || LstmSlots {
            w_ih: take(),
            w_hh: take(),
            bias: take(),
        };
        let encoder = (0..cfg.layers)
            .map(|_| (0..cfg.directions()).map(|_| lstm()).collect())
            .collect();
        let decoder = (0..cfg.layers).map(|_| lstm()).collect();
        let w_a = take();
        let w_c = take();
        let gen_w = take();
        let gen_b = take();
        Layout {
            src_emb,
            feat_embs,
            tgt_emb,
            encoder,
            decoder,
            w_a,
            w_c,
            gen_w,
            gen_b,
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(usize) -> U) -> Layout<U> {
        let l = |s: &LstmSlots<usize>| LstmSlots {
            w_ih: f(s.w_ih),
            w_hh: f(s.w_hh),
            bias: f(s.bias),
        };
        Layout {
            src_emb: f(self.src_emb),
            feat_embs: self.feat_embs.iter().map(|&i| f(i)).collect(),
            tgt_emb: f(self.tgt_emb),
            encoder: self.encoder.iter().map(|d| d.iter().map(l).collect()).collect(),
            decoder: self.decoder.iter().map(l).collect(),
            w_a: f(self.w_a),
            w_c: f(self.w_c),
            gen_w: f(self.gen_w),
            gen_b: f(self.gen_b),
        }
    }

    /// Indices of every LSTM bias tensor.
    pub fn lstm_biases(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .flatten()
            .chain(&self.decoder)
            .map(|s| s.bias)
            .collect()
    }
}

/// All learned tensors, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Zero-valued parameters with the manifest shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, tensors) = cfg
            .manifest()
            .into_iter()
            .map(|(n, s)| Ok((n, Tensor::zeros(&s)?.with_grad())))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(ModelParams { names, tensors })
    }

    /// Checks names and shapes against the config manifest.
    pub fn check_manifest(&self, cfg: &ModelConfig) -> Result<()> {
        let manifest = cfg.manifest();
        if manifest.len() != self.tensors.len() {
            return Err(ModelError::Mismatch(format!(
                "expected {} parameter tensors, found {}",
                manifest.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in manifest.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "parameter {n} {:?} does not match manifest entry {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a borrowed leaf on `tape`.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, cfg: &ModelConfig) -> Layout<Var> {
        let vars = self.register(tape);
        Layout::new(cfg).map(|i| vars[i])
    }

    /// Registers every tensor as a borrowed leaf, returning the handles in
    /// manifest order.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }
}

/// Draws every parameter i.i.d. from uniform(−0.1, 0.1) in manifest order;
/// LSTM biases start at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(cfg)?;
    let biases = Layout::new(cfg).lstm_biases();
    let mut rng = crate::rng::epoch_rng(seed, 0, Stream::Init);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if biases.contains(&i) {
            continue;
        }
        for v in t.data_mut() {
            *v = loop {
                let x: Scalar = rng.gen_range(-0.1..0.1);
                if x != -0.1 {
                    break x;
                }
            };
        }
    }
    Ok(params)
}

/// Per-pass dropout source; `None` everywhere at evaluation time.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout { p, rng: seeded(seed) }
    }

    pub fn with_rng(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng }
    }
}

fn apply_dropout(tape: &mut Tape<'_>, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    let Some(d) = dropout.as_deref_mut() else {
        return Ok(x);
    };
    if d.p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.p;
    let scale = (1.0 / keep) as Scalar;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<Scalar> = (0..n)
        .map(|_| if d.rng.gen_bool(keep) { scale } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Embeds `ids` (and feature ids) into `[batch, len, word_vec + nf·feat_vec]`.
pub fn embed(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    ids: &IdMatrix,
    feat_ids: &[IdMatrix],
    word_table: Var,
) -> Result<Var> {
    if feat_ids.len() != vars.feat_embs.len() {
        return Err(ModelError::Mismatch(format!(
            "expected {} feature streams, got {}",
            vars.feat_embs.len(),
            feat_ids.len()
        )));
    }
    let (b, l) = (ids.rows, ids.cols);
    let mut parts = vec![tape.gather_rows(word_table, &ids.data)?];
    for (&table, f) in vars.feat_embs.iter().zip(feat_ids) {
        if (f.rows, f.cols) != (b, l) {
            return Err(ModelError::Mismatch("feature matrix shape differs from word ids".into()));
        }
        parts.push(tape.gather_rows(table, &f.data)?);
    }
    let flat = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    let d = tape.shape(flat)[1];
    Ok(tape.reshape(flat, &[b, l, d])?)
}

/// One LSTM step. Returns `(h', c')`.
pub fn lstm_cell(tape: &mut Tape<'_>, x: Var, h: Var, c: Var, w: &LstmSlots<Var>) -> Result<(Var, Var)> {
    let hidden = tape.shape(w.w_hh)[0];
    if tape.shape(h) != tape.shape(c) || tape.shape(h).get(1) != Some(&hidden) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(h).to_vec(),
            right: tape.shape(c).to_vec(),
        }));
    }
    let xw = tape.matmul(x, w.w_ih)?;
    let hw = tape.matmul(h, w.w_hh)?;
    let pre = tape.add(xw, hw)?;
    let pre = tape.add_bias(pre, w.bias)?;
    let ifo = tape.slice(pre, 1, 0, 3 * hidden)?;
    let ifo = tape.sigmoid(ifo)?;
    let i = tape.slice(ifo, 1, 0, hidden)?;
    let f = tape.slice(ifo, 1, hidden, hidden)?;
    let o = tape.slice(ifo, 1, 2 * hidden, hidden)?;
    let g = tape.slice(pre, 1, 3 * hidden, hidden)?;
    let g = tape.tanh(g)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `[B, L, D]` → the `[B, D]` slice at position `t`.
fn time_step(tape: &mut Tape<'_>, seq: Var, t: usize) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let s = tape.slice(seq, 1, t, 1)?;
    Ok(tape.reshape(s, &[shape[0], shape[2]])?)
}

fn select(tape: &mut Tape<'_>, mask: &[bool], on: Var, off: Var) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        Ok(on)
    } else {
        Ok(tape.select_rows(mask, on, off)?)
    }
}

/// Encoder output on a tape.
pub struct Encoded {
    /// `[B, S, rnn_size]`, zero rows past each source length.
    pub context: Var,
    /// Per layer `(h, c)` at each row's last true position; directions are
    /// concatenated.
    pub finals: Vec<(Var, Var)>,
    /// Row-major `[B, S]` validity mask.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

pub fn source_mask(lengths: &[usize], max_len: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |t| t < n))
        .collect()
}

pub fn encode_sequence(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    cfg: &ModelConfig,
    src: &SourceBatch,
    mut dropout: Option<&mut Dropout>,
) -> Result<Encoded> {
    let (b, s) = (src.batch_size(), src.max_len());
    if b == 0 || s == 0 || src.lengths.iter().any(|&n| n == 0) {
        return Err(ModelError::EmptySource);
    }
    if src.lengths.iter().any(|&n| n > s) {
        return Err(ModelError::Mismatch("source length exceeds padded width".into()));
    }
    let emb = embed(tape, vars, &src.src, &src.feats, vars.src_emb)?;
    let emb = apply_dropout(tape, emb, &mut dropout)?;
    let mut inputs: Vec<Var> = (0..s).map(|t| time_step(tape, emb, t)).collect::<Result<_>>()?;
    let active: Vec<Vec<bool>> = (0..s)
        .map(|t| src.lengths.iter().map(|&n| t < n).collect())
        .collect();
    let hd = cfg.encoder_width();
    let mut finals = Vec::with_capacity(cfg.layers);
    for (l, dirs) in vars.encoder.iter().enumerate() {
        if l > 0 {
            inputs = inputs
                .into_iter()
                .map(|x| apply_dropout(tape, x, &mut dropout))
                .collect::<Result<_>>()?;
        }
        let zeros = tape.constant(Tensor::zeros(&[b, hd])?);
        let mut dir_outputs: Vec<Vec<Var>> = Vec::with_capacity(dirs.len());
        let mut dir_finals = Vec::with_capacity(dirs.len());
        for (d, w) in dirs.iter().enumerate() {
            let (mut h, mut c) = (zeros, zeros);
            let mut outs = vec![zeros; s];
            let order: Box<dyn Iterator<Item = usize>> = if d == 0 {
                Box::new(0..s)
            } else {
                Box::new((0..s).rev())
            };
            for t in order {
                let (h2, c2) = lstm_cell(tape, inputs[t], h, c, w)?;
                h = select(tape, &active[t], h2, h)?;
                c = select(tape, &active[t], c2, c)?;
                outs[t] = select(tape, &active[t], h2, zeros)?;
            }
            dir_outputs.push(outs);
            dir_finals.push((h, c));
        }
        let mut layer_out: Vec<Var> = (0..s)
            .map(|t| {
                if dir_outputs.len() == 1 {
                    Ok(dir_outputs[0][t])
                } else {
                    tape.concat(&[dir_outputs[0][t], dir_outputs[1][t]], 1)
                }
            })
            .collect::<std::result::Result<_, _>>()?;
        if l > 0 && cfg.residual {
            layer_out = layer_out
                .iter()
                .zip(&inputs)
                .map(|(&o, &x)| tape.add(o, x))
                .collect::<std::result::Result<_, _>>()?;
        }
        let fin = if dir_finals.len() == 1 {
            dir_finals[0]
        } else {
            let h = tape.concat(&[dir_finals[0].0, dir_finals[1].0], 1)?;
            let c = tape.concat(&[dir_finals[0].1, dir_finals[1].1], 1)?;
            (h, c)
        };
        finals.push(fin);
        inputs = layer_out;
    }
    let context = tape.stack_time(&inputs)?;
    Ok(Encoded {
        context,
        finals,
        mask: source_mask(&src.lengths, s),
        lengths: src.lengths.clone(),
    })
}

/// Global attention over `context`. Returns `(h̃, weights)`.
pub fn attention(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    h_t: Var,
    context: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let q = tape.matmul(h_t, vars.w_a)?;
    let scores = tape.batch_scores(context, q)?;
    let weights = tape.softmax_rows(scores, Some(mask))?;
    let mixed = tape.batch_mix(weights, context)?;
    let joined = tape.concat(&[mixed, h_t], 1)?;
    let proj = tape.matmul_nt(joined, vars.w_c)?;
    let h_tilde = tape.tanh(proj)?;
    Ok((h_tilde, weights))
}

/// Decoder recurrent state on a tape.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    pub input_feed: Var,
}

impl DecoderState {
    /// Encoder finals with an all-zero input feed.
    pub fn from_encoder(tape: &mut Tape<'_>, enc: &Encoded, cfg: &ModelConfig) -> Result<Self> {
        let b = enc.lengths.len();
        let input_feed = tape.constant(Tensor::zeros(&[b, cfg.rnn_size])?);
        Ok(DecoderState {
            layers: enc.finals.clone(),
            input_feed,
        })
    }
}

/// Output of one decoder step.
pub struct StepOutput {
    pub h_tilde: Var,
    pub state: DecoderState,
    pub attn: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    cfg: &ModelConfig,
    y_prev: &[usize],
    state: &DecoderState,
    context: Var,
    mask: &[bool],
    mut dropout: Option<&mut Dropout>,
) -> Result<StepOutput> {
    if state.layers.len() != cfg.layers {
        return Err(ModelError::Mismatch(format!(
            "decoder state has {} layers, config has {}",
            state.layers.len(),
            cfg.layers
        )));
    }
    let emb = tape.gather_rows(vars.tgt_emb, y_prev)?;
    let emb = apply_dropout(tape, emb, &mut dropout)?;
    let mut x = if cfg.input_feed {
        tape.concat(&[emb, state.input_feed], 1)?
    } else {
        emb
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, (w, &(h, c))) in vars.decoder.iter().zip(&state.layers).enumerate() {
        if l > 0 {
            x = apply_dropout(tape, x, &mut dropout)?;
        }
        let (h2, c2) = lstm_cell(tape, x, h, c, w)?;
        layers.push((h2, c2));
        x = if l > 0 && cfg.residual { tape.add(h2, x)? } else { h2 };
    }
    let (h_tilde, attn) = attention(tape, vars, x, context, mask)?;
    Ok(StepOutput {
        h_tilde,
        state: DecoderState {
            layers,
            input_feed: h_tilde,
        },
        attn,
    })
}

/// Log-softmax of `h̃·Wᵀ + b`.
pub fn generator_logprobs(tape: &mut Tape<'_>, vars: &Layout<Var>, h_tilde: Var) -> Result<Var> {
    let logits = tape.matmul_nt(h_tilde, vars.gen_w)?;
    let logits = tape.add_bias(logits, vars.gen_b)?;
    Ok(tape.log_softmax_rows(logits)?)
}

/// Teacher-forced forward pass over a batch.
pub struct ForwardOutput {
    /// Summed NLL over non-pad targets (scalar).
    pub loss: Var,
    pub ntokens: usize,
    /// Attention weights per target step, each `[B, S]`.
    pub attention: Vec<Var>,
}

pub fn forward_loss(
    tape: &mut Tape<'_>,
    vars: &Layout<Var>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut dropout: Option<&mut Dropout>,
) -> Result<ForwardOutput> {
    let enc = encode_sequence(tape, vars, cfg, &batch.source, dropout.as_deref_mut())?;
    let mut state = DecoderState::from_encoder(tape, &enc, cfg)?;
    let steps = batch.target_steps();
    let mut outs = Vec::with_capacity(steps);
    let mut attn = Vec::with_capacity(steps);
    for t in 0..steps {
        let y_prev = batch.tgt_in.column(t);
        let step = decode_step(tape, vars, cfg, &y_prev, &state, enc.context, &enc.mask, dropout.as_deref_mut())?;
        outs.push(step.h_tilde);
        attn.push(step.attn);
        state = step.state;
    }
    let stacked = tape.concat(&outs, 0)?;
    let logprobs = generator_logprobs(tape, vars, stacked)?;
    let targets: Vec<usize> = (0..steps).flat_map(|t| batch.tgt_out.column(t)).collect();
    let loss = tape.nll_loss(logprobs, &targets, crate::data::PAD)?;
    Ok(ForwardOutput {
        loss,
        ntokens: batch.ntokens,
        attention: attn,
    })
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Seq2Seq { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_manifest(&config)?;
        Ok(Seq2Seq { config, params })
    }

    /// Summed NLL and target token count for a batch, without gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<(f64, usize)> {
        let mut tape = Tape::inference();
        let vars = self.params.on_tape(&mut tape, &self.config);
        let out = forward_loss(&mut tape, &vars, &self.config, batch, None)?;
        Ok((tape.value(out.loss).data()[0] as f64, out.ntokens))
    }

    /// Summed NLL, token count and the gradient of `loss / ntokens` for
    /// each parameter (manifest order).
    pub fn loss_and_grads(&self, batch: &Batch, dropout: Option<&mut Dropout>) -> Result<(f64, usize, Vec<Vec<Scalar>>)> {
        let mut tape = Tape::new();
        let leaves = self.params.register(&mut tape);
        let vars = Layout::new(&self.config).map(|i| leaves[i]);
        let out = forward_loss(&mut tape, &vars, &self.config, batch, dropout)?;
        let loss = tape.value(out.loss).data()[0] as f64;
        let norm = out.ntokens.max(1) as Scalar;
        let scaled = tape.scale(out.loss, 1.0 / norm)?;
        tape.backward(scaled)?;
        let grads = leaves
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((loss, out.ntokens, grads))
    }
}
