//! Attentional encoder-decoder translation toolkit: text preprocessing, an
//! LSTM encoder-decoder with global attention trained by plain SGD on a
//! built-in reverse-mode autodiff tape, and a beam-search decoder.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use data::{Batch, Example, SideVocabs, Vocab};
pub use model::{ModelConfig, ModelParams, Seq2Seq};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
