//! Split federated learning with zeroth-order client updates.
//!
//! Clients train their submodel and a small auxiliary head with seeded
//! two-point zeroth-order estimates, so they never backpropagate or cache
//! activations. The server trains its submodel on uploaded cut-layer
//! activations with ordinary backpropagation. First-order baselines (SFLV2 and
//! a decoupled first-order client) run on the same schedule for comparison.
//!
//! Modules:
//!
//! * [`nn`]: dense networks, cross-entropy, exact backprop.
//! * [`zo`]: perturbation directions and the two-point estimator.
//! * [`protocol`]: clients, Main-Server, Fed-Server and the round loop.
//! * [`ledger`]: closed-form costs and measured counters.
//! * [`data`]: synthetic blobs, IID and Dirichlet partitions.
//! * [`spectral`]: Hessian-vector products, stochastic Lanczos, effective rank.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix it to `f64`, which is what the simulator and its tolerances assume.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod ledger;
pub mod matrix;
pub mod nn;
pub mod protocol;
pub mod scalar;
pub mod seed;
pub mod spectral;
pub mod zo;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = matrix::Matrix<f64>;
pub type DenseNet = nn::DenseNet<f64>;
pub type Batch = nn::Batch<f64>;
pub type ForwardCache = nn::ForwardCache<f64>;
pub type PerturbationTicket = zo::PerturbationTicket<f64>;
pub type ZoGradEstimate = zo::ZoGradEstimate<f64>;
pub type LabeledDataset = data::LabeledDataset<f64>;
pub type ModelPartition = protocol::ModelPartition<f64>;
pub type RoundConfig = protocol::RoundConfig<f64>;
pub type RoundMetrics = protocol::RoundMetrics<f64>;
pub type SmashedBatch = protocol::SmashedBatch<f64>;
pub type ClientState = protocol::ClientState<f64>;
pub type MainServerState = protocol::MainServerState<f64>;
pub type TrainingRun = protocol::TrainingRun<f64>;
pub type SpectrumEstimate = spectral::SpectrumEstimate<f64>;
pub type EffectiveRankReport = spectral::EffectiveRankReport<f64>;
