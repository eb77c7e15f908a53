//! Adversarial-perturbation evaluation of pixel relevance maps.
//!
//! The crate bundles a small feed-forward network engine ([`net`]), six
//! attribution methods with the usual visualization simplification
//! ([`explain`]), the perturbation-gap measure itself ([`apem`]), a map
//! filter that keeps the measure intact ([`filter`]) and the rank statistics
//! used to compare methods ([`stats`]).
//!
//! All numeric types are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! evaluation pipeline uses.

pub mod apem;
pub mod data;
pub mod error;
pub mod explain;
pub mod filter;
pub mod mapfile;
pub mod net;
pub mod records;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network64 = net::Network<f64>;
pub type Network32 = net::Network<f32>;
pub type Sample64 = data::Sample<f64>;
pub type Dataset64 = data::Dataset<f64>;
