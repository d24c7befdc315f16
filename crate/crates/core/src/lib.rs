//! Joint audio/text masked pretraining: features, tokenizer, masking,
//! encoders, losses, data preparation, training and evaluation.

pub mod audio;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use audio::{AudioClip, MelSpectrogram};
pub use config::RunConfig;
pub use data::{Segment, TranscriptRecord};
pub use error::{Error, Result};
pub use masking::MaskPlan;
pub use model::{HiddenStates, Modality, Model, ModelConfig, Parameters};
pub use objectives::{LossBundle, LossWeights};
pub use tensor::Mat;
pub use tokenizer::{TokenSequence, Vocabulary};
pub use trainer::{TrainConfig, Trainer};
