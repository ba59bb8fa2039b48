//! Single-file binary container for checkpoints and preprocessed datasets.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "SEQFORGE"
//! 4 bytes   header length N, u32 little-endian
//! N bytes   UTF-8 JSON header
//! ...       raw little-endian IEEE-754 values of every parameter, in
//!           manifest order, at the width named by the header's "dtype"
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, SideVocabs, Vocab};
use crate::model::{ModelConfig, ModelParams, Seq2Seq};
use crate::tensor::{Scalar, Tensor, SCALAR_NAME};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SEQFORGE";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a SEQFORGE file")]
    BadMagic,
    #[error("unknown format version {0:?}")]
    UnknownVersion(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected a {expected} file, found {found}")]
    WrongKind { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Token lists (id order) for every vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VocabTokens {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    #[serde(default)]
    pub src_feats: Vec<Vec<String>>,
}

/// Source and target vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabs {
    pub src: SideVocabs,
    pub tgt: Vocab,
}

impl Vocabs {
    pub fn to_tokens(&self) -> VocabTokens {
        VocabTokens {
            src: self.src.words.tokens().to_vec(),
            tgt: self.tgt.tokens().to_vec(),
            src_feats: self.src.features.iter().map(|v| v.tokens().to_vec()).collect(),
        }
    }

    pub fn from_tokens(t: VocabTokens) -> Result<Self> {
        let bad = |e: crate::data::DataError| CheckpointError::Header(e.to_string());
        Ok(Vocabs {
            src: SideVocabs {
                words: Vocab::from_tokens(t.src).map_err(bad)?,
                features: t
                    .src_feats
                    .into_iter()
                    .map(Vocab::from_tokens)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(bad)?,
            },
            tgt: Vocab::from_tokens(t.tgt).map_err(bad)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: String,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<TrainState>,
    vocabs: VocabTokens,
    #[serde(default)]
    manifest: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetBody>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetBody {
    feature_separator: char,
    train: Vec<Example>,
    valid: Vec<Example>,
}

fn write_envelope(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| CheckpointError::Header("header too large".into()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

fn read_envelope(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated {
                expected: 12,
                found: bytes.len(),
            }
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + len {
        return Err(CheckpointError::Truncated {
            expected: 12 + len,
            found: bytes.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(header.version));
    }
    Ok((header, &bytes[12 + len..]))
}

fn expect_kind(header: &Header, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(CheckpointError::WrongKind {
            expected: kind.into(),
            found: header.kind.clone(),
        });
    }
    Ok(())
}

/// Everything needed to resume training or to translate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub vocabs: Vocabs,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn into_model(self) -> crate::model::Result<(Seq2Seq, Vocabs)> {
        Ok((Seq2Seq::from_parts(self.model, self.params)?, self.vocabs))
    }
}

fn encode_values(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.count() * std::mem::size_of::<Scalar>());
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_values(dtype: &str, payload: &[u8], manifest: &[ManifestEntry]) -> Result<Vec<Tensor>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(CheckpointError::Header(format!("unknown dtype {other:?}"))),
    };
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() < total * width {
        return Err(CheckpointError::Truncated {
            expected: total * width,
            found: payload.len(),
        });
    }
    if payload.len() > total * width {
        return Err(CheckpointError::ManifestMismatch(format!(
            "{} trailing bytes after parameter data",
            payload.len() - total * width
        )));
    }
    let mut chunks = payload.chunks_exact(width);
    let mut read = || -> Scalar {
        let c = chunks.next().expect("length checked");
        if width == 4 {
            f32::from_le_bytes(c.try_into().expect("4 bytes")) as Scalar
        } else {
            f64::from_le_bytes(c.try_into().expect("8 bytes")) as Scalar
        }
    };
    manifest
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = (0..n).map(|_| read()).collect();
            Tensor::new(&e.shape, data)
                .map(Tensor::with_grad)
                .map_err(|err| CheckpointError::ManifestMismatch(err.to_string()))
        })
        .collect()
}

pub fn checkpoint_save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params
        .check_manifest(&ckpt.model)
        .map_err(|e| CheckpointError::ManifestMismatch(e.to_string()))?;
    let header = Header {
        kind: "checkpoint".into(),
        version: FORMAT_VERSION.into(),
        dtype: SCALAR_NAME.into(),
        model: Some(ckpt.model.clone()),
        train: Some(ckpt.train.clone()),
        state: Some(ckpt.state.clone()),
        vocabs: ckpt.vocabs.to_tokens(),
        manifest: ckpt
            .params
            .names
            .iter()
            .zip(&ckpt.params.tensors)
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        dataset: None,
    };
    write_envelope(path.as_ref(), &header, &encode_values(&ckpt.params))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_envelope(bytes)?;
    expect_kind(&header, "checkpoint")?;
    let missing = |f: &str| CheckpointError::Header(format!("missing {f}"));
    let model = header.model.ok_or_else(|| missing("model"))?;
    let expected: Vec<ManifestEntry> = model
        .manifest()
        .into_iter()
        .map(|(name, shape)| ManifestEntry { name, shape })
        .collect();
    if expected != header.manifest {
        return Err(CheckpointError::ManifestMismatch(
            "parameter manifest does not match the model config".into(),
        ));
    }
    let tensors = decode_values(&header.dtype, payload, &header.manifest)?;
    let params = ModelParams {
        names: header.manifest.into_iter().map(|e| e.name).collect(),
        tensors,
    };
    Ok(Checkpoint {
        model,
        train: header.train.ok_or_else(|| missing("train"))?,
        state: header.state.ok_or_else(|| missing("state"))?,
        vocabs: Vocabs::from_tokens(header.vocabs)?,
        params,
    })
}

/// Output of preprocessing: vocabularies plus encoded training and
/// validation examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabs: Vocabs,
    pub feature_separator: char,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

pub fn dataset_save(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let header = Header {
        kind: "dataset".into(),
        version: FORMAT_VERSION.into(),
        dtype: SCALAR_NAME.into(),
        model: None,
        train: None,
        state: None,
        vocabs: ds.vocabs.to_tokens(),
        manifest: Vec::new(),
        dataset: Some(DatasetBody {
            feature_separator: ds.feature_separator,
            train: ds.train.clone(),
            valid: ds.valid.clone(),
        }),
    };
    write_envelope(path.as_ref(), &header, &[])
}

pub fn dataset_load(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (header, _) = read_envelope(&bytes)?;
    expect_kind(&header, "dataset")?;
    let body = header
        .dataset
        .ok_or_else(|| CheckpointError::Header("missing dataset body".into()))?;
    Ok(Dataset {
        vocabs: Vocabs::from_tokens(header.vocabs)?,
        feature_separator: body.feature_separator,
        train: body.train,
        valid: body.valid,
    })
}
