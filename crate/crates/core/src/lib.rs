//! Row/column-factored and guided holistic cross-modal attention for
//! referring segmentation, built on a small reverse-mode autodiff tape over
//! `f64` tensors, with a synthetic benchmark to train and evaluate it.

pub mod attention;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod holi;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod roco;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{BlockSpec, FusionKind, Variant};
pub use model::{Cprn, ModelConfig};
pub use params::ParameterStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
