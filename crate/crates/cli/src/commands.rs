use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use seqforge::checkpoint::{self, Checkpoint, Dataset, Vocabs};
use seqforge::data::{build_side_vocabs, encode_corpus, DataError};
use seqforge::decoder::{translate_batch, DecodeError};
use seqforge::model::Seq2Seq;
use seqforge::trainer::{self, TrainState};

use crate::config::{existing, RunConfig};
use crate::{PreprocessArgs, TrainArgs, TranslateArgs};

fn read_lines(key: &str, path: &Path) -> Result<Vec<String>, String> {
    let path = existing(key, path).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(&path).map_err(|e| format!("{key}: {}: {e}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Feature count implied by the first token of the first non-empty line.
fn detect_features(lines: &[String], sep: char) -> usize {
    lines
        .iter()
        .find_map(|l| l.split_ascii_whitespace().next())
        .map_or(0, |tok| tok.matches(sep).count())
}

pub fn preprocess(a: &PreprocessArgs, cfg: &RunConfig) -> Result<(), String> {
    let d = &cfg.data;
    let train_src = read_lines("train_src", &a.train_src)?;
    let train_tgt = read_lines("train_tgt", &a.train_tgt)?;
    let valid_src = read_lines("valid_src", &a.valid_src)?;
    let valid_tgt = read_lines("valid_tgt", &a.valid_tgt)?;
    if train_src.len() != train_tgt.len() {
        return Err(format!(
            "train_tgt: {} lines but train_src has {}",
            train_tgt.len(),
            train_src.len()
        ));
    }
    if valid_src.len() != valid_tgt.len() {
        return Err(format!(
            "valid_tgt: {} lines but valid_src has {}",
            valid_tgt.len(),
            valid_src.len()
        ));
    }
    let sep = d.feature_separator;
    let nf = detect_features(&train_src, sep);
    let src = build_side_vocabs(&train_src, nf, sep, d.src_vocab_size, d.words_min_frequency)
        .map_err(|e| format!("train_src: {e}"))?;
    let tgt = build_side_vocabs(&train_tgt, 0, sep, d.tgt_vocab_size, d.words_min_frequency)
        .map_err(|e| format!("train_tgt: {e}"))?;
    let encode = |s: &[String], t: &[String], which: &str| {
        let (ex, dropped) = encode_corpus(s, t, &src, &tgt, sep, d.src_seq_length, d.tgt_seq_length)
            .map_err(|e| format!("{which}: {e}"))?;
        log::info!("{which}: {} examples kept, {dropped} dropped (empty or over length limits)", ex.len());
        Ok::<_, String>(ex)
    };
    let train = encode(&train_src, &train_tgt, "train")?;
    let valid = encode(&valid_src, &valid_tgt, "valid")?;
    if train.is_empty() || valid.is_empty() {
        return Err("save_data: no examples survived filtering".into());
    }
    log::info!(
        "vocabularies: source {} words, {} feature streams {:?}, target {} words",
        src.words.len(),
        nf,
        src.features.iter().map(|v| v.len()).collect::<Vec<_>>(),
        tgt.words.len()
    );
    let ds = Dataset {
        vocabs: Vocabs { src, tgt: tgt.words },
        feature_separator: sep,
        train,
        valid,
    };
    checkpoint::dataset_save(&a.save_data, &ds).map_err(|e| format!("save_data: {e}"))?;
    log::info!("wrote {}", a.save_data.display());
    Ok(())
}

fn checkpoint_path(prefix: &Path, epoch: usize) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(format!("_epoch{epoch}.ckpt"));
    PathBuf::from(name)
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<(), String> {
    let data_path = existing("data", &a.data).map_err(|e| e.to_string())?;
    let ds = checkpoint::dataset_load(&data_path).map_err(|e| format!("data: {e}"))?;
    let tcfg = cfg.train.clone();

    let (mut model, state) = match &a.train_from {
        Some(path) => {
            let path = existing("train_from", path).map_err(|e| e.to_string())?;
            let ckpt = checkpoint::checkpoint_load(&path).map_err(|e| format!("train_from: {e}"))?;
            if ckpt.vocabs != ds.vocabs {
                return Err("train_from: checkpoint vocabularies differ from the dataset".into());
            }
            log::info!("resuming from {} after epoch {}", path.display(), ckpt.state.epoch);
            let state = ckpt.state.clone();
            let (model, _) = ckpt.into_model().map_err(|e| format!("train_from: {e}"))?;
            (model, state)
        }
        None => {
            let mut mcfg = cfg.model.clone();
            mcfg.src_vocab_size = ds.vocabs.src.words.len();
            mcfg.tgt_vocab_size = ds.vocabs.tgt.len();
            mcfg.num_features = ds.vocabs.src.num_features();
            mcfg.feat_vocab_sizes = ds.vocabs.src.features.iter().map(|v| v.len()).collect();
            let model = Seq2Seq::new(mcfg, tcfg.rng_seed).map_err(|e| e.to_string())?;
            (model, TrainState::new(&tcfg))
        }
    };
    log::info!(
        "model: {} parameters, {} training / {} validation examples",
        model.params.count(),
        ds.train.len(),
        ds.valid.len()
    );

    let save = |m: &Seq2Seq, s: &TrainState| -> Result<PathBuf, String> {
        let path = checkpoint_path(&a.save_model, s.epoch);
        let ckpt = Checkpoint {
            model: m.config.clone(),
            train: tcfg.clone(),
            state: s.clone(),
            vocabs: ds.vocabs.clone(),
            params: m.params.clone(),
        };
        checkpoint::checkpoint_save(&path, &ckpt).map_err(|e| format!("save_model: {e}"))?;
        Ok(path)
    };

    if state.epoch >= tcfg.epochs {
        let path = save(&model, &state)?;
        log::info!("no epochs to run; wrote {}", path.display());
        return Ok(());
    }

    let stdout = io::stdout();
    println!("epoch\ttrain_ppl\tvalid_ppl\tlearning_rate\ttokens_per_sec");
    trainer::train(&mut model, &ds.train, &ds.valid, &tcfg, state, |m, s, report| {
        let mut out = stdout.lock();
        writeln!(out, "{}", report.log_line()).map_err(|e| e.to_string())?;
        out.flush().map_err(|e| e.to_string())?;
        let path = save(m, s)?;
        log::info!("wrote {}", path.display());
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(())
}

pub fn translate(a: &TranslateArgs, cfg: &RunConfig) -> Result<(), String> {
    if a.batch_size == 0 {
        return Err("batch_size: must be >= 1".into());
    }
    let model_path = existing("model", &a.model).map_err(|e| e.to_string())?;
    let ckpt = checkpoint::checkpoint_load(&model_path).map_err(|e| format!("model: {e}"))?;
    let sep = cfg.data.feature_separator;
    let (model, vocabs) = ckpt.into_model().map_err(|e| format!("model: {e}"))?;
    let lines = read_lines("src", &a.src)?;

    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).map_err(|e| format!("output: {}: {e}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let write_err = |e: io::Error| format!("output: {e}");
    for (chunk_no, chunk) in lines.chunks(a.batch_size).enumerate() {
        let offset = chunk_no * a.batch_size;
        let results = translate_batch(&model, chunk, &vocabs.src, &vocabs.tgt, sep, &cfg.decode)
            .map_err(|e| format!("src: {}", with_line_offset(e, offset)))?;
        for cands in results {
            for c in cands {
                writeln!(out, "{}\t{}", c.score, c.text).map_err(write_err)?;
            }
            writeln!(out).map_err(write_err)?;
        }
    }
    out.flush().map_err(write_err)?;
    log::info!("translated {} lines", lines.len());
    Ok(())
}

/// Shifts chunk-relative line numbers in a decode error to file lines.
fn with_line_offset(e: DecodeError, offset: usize) -> DecodeError {
    match e {
        DecodeError::EmptyLine(n) => DecodeError::EmptyLine(n + offset),
        DecodeError::Data(DataError::InconsistentFeatures {
            line,
            token,
            found,
            expected,
        }) => DecodeError::Data(DataError::InconsistentFeatures {
            line: line + offset,
            token,
            found,
            expected,
        }),
        other => other,
    }
}
