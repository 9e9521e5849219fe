//! Exact infinite-width graph neural tangent kernels for node classification,
//! trainability diagnostics for deep graph convolutional networks, critical
//! edge sampling, and a finite-width Monte-Carlo oracle.
//!
//! All numerical code is generic over the scalar type through
//! [`scalar::Scalar`]; the `*64` aliases below pin the common `f64` choices.

pub mod activation;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod operator;
pub mod quad;
pub mod sampling;
pub mod scalar;

pub use error::{Error, Result};
pub use graph::Graph;
pub use scalar::Scalar;

pub type FeatureMatrix64 = data::FeatureMatrix<f64>;
pub type AggregationOperator64 = operator::AggregationOperator<f64>;
pub type SpectralSummary64 = operator::SpectralSummary<f64>;
pub type GntkConfig64 = kernel::GntkConfig<f64>;
pub type KernelState64 = kernel::KernelState<f64>;
pub type KernelRun64 = kernel::KernelRun<f64>;
pub type GcnConfig64 = network::GcnConfig<f64>;
pub type EmpiricalNtk64 = network::EmpiricalNtk<f64>;

/// Mix a base seed with a stream index into an independent 64-bit seed
/// (splitmix64 finalizer). Used to derive per-trial/per-init RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
