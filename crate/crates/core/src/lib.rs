//! Face forgery detection on a small convolutional backbone gated by
//! multi-scale frequency cues, trained around an EMA prototype of real
//! images. Ships its own tensor and autodiff substrate.

pub mod audit;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod mswgm;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Mode, ModelConfig};
pub use dataset::{Family, LabeledImage};
pub use error::{Error, Result};
pub use losses::Label;
pub use model::LrdNet;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
