//! Image manipulation localisation at desk scale: a small reverse-mode
//! autodiff engine, a trace encoder built on constrained convolutions, a
//! frozen content backbone, a language-model stand-in that emits a `[SEG]`
//! prompt, a three-layer fusion decoder, a procedural tamper generator and
//! the evaluation harness.

pub mod tensor;
pub mod nn;
pub mod trace;
pub mod backbone;
pub mod stub;
pub mod decoder;
pub mod losses;
pub mod model;
pub mod forge;
pub mod train;
pub mod eval;

pub use eval::{evaluate, Distortion, EvalError, EvalOptions, MetricsReport};
pub use forge::{build_dataset, DatasetManifest, ForgeConfig, ForgeError, ImageSample, Label, ManipulationType, Mix};
pub use losses::LossWeights;
pub use model::{Model, ModelConfig, Prediction, TraceMode};
pub use stub::{TokenSequence, VocabError, Vocabulary};
pub use tensor::{Tensor, TensorError};
pub use train::{train, Checkpoint, TrainConfig, TrainError, Trainer};

/// Any error the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, Error>;
