//! `seqforge` command-line tool.
//!
//! Flags are snake_case and may be written with one dash (`-layers 2`) or
//! two (`--layers 2`).

mod commands;
mod config;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{ConfigError, Override};

#[derive(Parser, Debug)]
#[command(name = "seqforge", version, about = "Attentional encoder-decoder NMT toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[command(rename_all = "snake_case")]
enum Command {
    /// Build vocabularies and encode a parallel corpus into a dataset file.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed dataset, checkpointing every epoch.
    Train(TrainArgs),
    /// Translate a file of source sentences with beam search.
    Translate(TranslateArgs),
    /// Serve translations over a line-delimited JSON TCP protocol.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct Common {
    /// JSON config file with optional "model", "train", "decode" and "data" sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
pub struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub valid_src: PathBuf,
    #[arg(long)]
    pub valid_tgt: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    pub save_data: PathBuf,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset written by `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path prefix; epoch N is written to `<prefix>_epochN.ckpt`.
    #[arg(long)]
    pub save_model: PathBuf,
    /// Resume from this checkpoint (model shape comes from the checkpoint).
    #[arg(long)]
    pub train_from: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
pub struct TranslateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub src: PathBuf,
    /// n-best output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Sentences per encoder pass.
    #[arg(long, default_value_t = 30)]
    pub batch_size: usize,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
pub struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on standard output.
    #[arg(long, default_value_t = 5000)]
    pub port: u16,
    #[command(flatten)]
    decode: DecodeFlags,
}

macro_rules! overrides {
    ($self:ident, $section:literal, $($field:ident),*) => {{
        let mut out: Vec<Override> = Vec::new();
        $(
            if let Some(v) = &$self.$field {
                out.push(($section, stringify!($field), json!(v)));
            }
        )*
        out
    }};
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    rnn_size: Option<usize>,
    #[arg(long)]
    word_vec_size: Option<usize>,
    #[arg(long)]
    feat_vec_size: Option<usize>,
    #[arg(long)]
    bidirectional: Option<bool>,
    #[arg(long)]
    residual: Option<bool>,
    #[arg(long)]
    input_feed: Option<bool>,
}

impl ModelFlags {
    fn overrides(&self) -> Vec<Override> {
        overrides!(self, "model", layers, rnn_size, word_vec_size, feat_vec_size, bidirectional, residual, input_feed)
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay_rate: Option<f64>,
    #[arg(long)]
    start_decay_at: Option<usize>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<Override> {
        overrides!(
            self,
            "train",
            epochs,
            batch_size,
            learning_rate,
            decay_rate,
            start_decay_at,
            max_grad_norm,
            sample_fraction,
            rng_seed,
            dropout
        )
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    n_best: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_alpha: Option<f64>,
    #[arg(long)]
    replace_unk: Option<bool>,
}

impl DecodeFlags {
    fn overrides(&self) -> Vec<Override> {
        overrides!(self, "decode", beam_size, n_best, max_len, length_alpha, replace_unk)
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct DataFlags {
    #[arg(long)]
    src_vocab_size: Option<usize>,
    #[arg(long)]
    tgt_vocab_size: Option<usize>,
    #[arg(long)]
    words_min_frequency: Option<usize>,
    #[arg(long)]
    src_seq_length: Option<usize>,
    #[arg(long)]
    tgt_seq_length: Option<usize>,
    #[arg(long)]
    feature_separator: Option<char>,
}

impl DataFlags {
    fn overrides(&self) -> Vec<Override> {
        overrides!(
            self,
            "data",
            src_vocab_size,
            tgt_vocab_size,
            words_min_frequency,
            src_seq_length,
            tgt_seq_length,
            feature_separator
        )
    }
}

/// `-flag` → `--flag`; negative numbers and `--flag` pass through.
fn normalize_args(args: impl IntoIterator<Item = String>) -> Vec<String> {
    args.into_iter()
        .enumerate()
        .map(|(i, a)| {
            let single = i > 0
                && a.len() > 2
                && a.starts_with('-')
                && !a.starts_with("--")
                && a[1..].starts_with(|c: char| c.is_ascii_alphabetic());
            if single {
                format!("-{a}")
            } else {
                a
            }
        })
        .collect()
}

/// One-line rendering of a clap error.
fn clap_message(e: &clap::Error) -> String {
    use clap::error::{ContextKind, ContextValue, ErrorKind};
    let ctx = |kind| match e.get(kind) {
        Some(ContextValue::String(s)) => s.clone(),
        Some(ContextValue::Strings(v)) => v.join(", "),
        Some(other) => other.to_string(),
        None => String::new(),
    };
    let flag = |s: String| s.trim_start_matches('-').split([' ', '=']).next().unwrap_or_default().to_string();
    match e.kind() {
        ErrorKind::UnknownArgument => format!("{}: unknown flag", flag(ctx(ContextKind::InvalidArg))),
        ErrorKind::MissingRequiredArgument => format!("{}: missing required flag", flag(ctx(ContextKind::InvalidArg))),
        ErrorKind::InvalidValue | ErrorKind::ValueValidation => format!(
            "{}: invalid value {:?}",
            flag(ctx(ContextKind::InvalidArg)),
            ctx(ContextKind::InvalidValue)
        ),
        ErrorKind::InvalidSubcommand => format!("{}: unknown subcommand", ctx(ContextKind::InvalidSubcommand)),
        _ => e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string(),
    }
}

/// Echoes the resolved configuration as one JSON line.
fn echo(cfg: &config::RunConfig, sections: &[&str]) {
    let all = serde_json::to_value(cfg).expect("config serializes");
    let shown: serde_json::Map<String, Value> = sections.iter().map(|s| (s.to_string(), all[*s].clone())).collect();
    log::info!("resolved config: {}", Value::Object(shown));
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg_err = |e: ConfigError| e.to_string();
    match cli.command {
        Command::Preprocess(a) => {
            let cfg = config::resolve(a.common.config.as_deref(), &a.data.overrides()).map_err(cfg_err)?;
            echo(&cfg, &["data"]);
            commands::preprocess(&a, &cfg)
        }
        Command::Train(a) => {
            let mut flags = a.model.overrides();
            flags.extend(a.train.overrides());
            let cfg = config::resolve(a.common.config.as_deref(), &flags).map_err(cfg_err)?;
            echo(&cfg, &["model", "train"]);
            commands::train(&a, &cfg)
        }
        Command::Translate(a) => {
            let cfg = config::resolve(a.common.config.as_deref(), &a.decode.overrides()).map_err(cfg_err)?;
            echo(&cfg, &["decode"]);
            commands::translate(&a, &cfg)
        }
        Command::Serve(a) => {
            let cfg = config::resolve(a.common.config.as_deref(), &a.decode.overrides()).map_err(cfg_err)?;
            echo(&cfg, &["decode"]);
            serve::run(&a, &cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse_from(normalize_args(std::env::args())) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("seqforge: error: {}", clap_message(&e));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("seqforge: error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn single_dash_flags_are_normalized() {
        assert_eq!(
            normalize_args(args("seqforge train -data d -lr -0.5 --epochs 2 -h")),
            args("seqforge train --data d --lr -0.5 --epochs 2 -h")
        );
    }

    #[test]
    fn flags_parse_into_overrides() {
        let cli = Cli::try_parse_from(normalize_args(args("seqforge train -data d -save_model m -layers 3 -lr 0.3"))).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut o = a.model.overrides();
        o.extend(a.train.overrides());
        assert_eq!(o, vec![("model", "layers", json!(3)), ("train", "learning_rate", json!(0.3))]);
    }

    #[test]
    fn clap_errors_name_the_flag() {
        let e = Cli::try_parse_from(normalize_args(args("seqforge train -data d -save_model m -bogus 1"))).unwrap_err();
        assert_eq!(clap_message(&e), "bogus: unknown flag");
        let e = Cli::try_parse_from(normalize_args(args("seqforge train -save_model m"))).unwrap_err();
        assert_eq!(clap_message(&e), "data: missing required flag");
    }
}
