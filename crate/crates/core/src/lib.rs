//! Kolmogorov–Arnold layers, small convolutional classifiers and the
//! training loop used to compare them on surface-defect images.
//!
//! Everything runs on the CPU in `f64` on top of a small reverse-mode tape
//! ([`Tape`]).

pub mod autograd;
pub mod bspline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{GradMap, ParamId, Primitive, Tape, Var};
pub use bspline::{KnotGrid, SplineCoeffs};
pub use data::{DatasetSplit, LabeledImage};
pub use error::{Error, Result};
pub use kan::KanLinearLayer;
pub use model::{build_model, param_count, KanConfig, Layer, Model, ModelName, ModelSpec};
pub use tensor::Tensor;
pub use train::{RunReport, TrainConfig};
