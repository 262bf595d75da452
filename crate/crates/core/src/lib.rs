//! Deterministic source-free domain adaptation with Jacobian-norm regularization.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod tensor;

pub use data::Dataset;
pub use diffcore::{Graph, NodeId};
pub use error::{Error, Result};
pub use model::EncoderClassifier;
pub use tensor::Tensor;
