//! Adversarial metric attacks on retrieval embeddings, and the
//! metric-preserving retraining that defends against them.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`] is a small reverse-mode autodiff engine over dense tensors.
//! - [`embedder`] builds and trains fully connected feature extractors.
//! - [`metrics`] holds Euclidean and Mahalanobis distances and the attack
//!   objective.
//! - [`attacks`] implements FGSM, I-FGSM and MI-FGSM against gallery images.
//! - [`defense`] retrains on adversarially perturbed training data.
//! - [`eval`] scores retrieval with mAP and CMC.
//! - [`data`] generates, loads and exports image sets.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod defense;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, GraphError, NodeId};
pub use tensor::Tensor;
