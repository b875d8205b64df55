//! Graph neural networks for text classification.
//!
//! Documents become graphs of words ([`text2graph`]), which are classified
//! by one of four architectures ([`model::Arch`]) built from graph
//! convolution, hybrid convolution and graph pooling layers ([`layers`]).
//! Everything runs on a small tape-based reverse-mode differentiator
//! ([`autodiff`]) over dense row-major matrices ([`tensor`]).

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod text2graph;
pub mod training;

pub use error::{Error, Result};
pub use model::{Arch, ModelParams, ModelSpec};
pub use tensor::{Scalar, Tensor};
pub use text2graph::TextGraph;
pub use training::{TrainConfig, Trainer};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
