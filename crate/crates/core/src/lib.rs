//! Average-reward soft actor-critic agents pricing in a repeated
//! logit-Bertrand market.
//!
//! * [`market`]: demand, profits, Nash and monopoly benchmarks, price box.
//! * [`netcore`]: dense networks with hand-written reverse mode and Adam.
//! * [`replay`]: FIFO experience store with uniform sampling.
//! * [`agent`]: the soft actor-critic learner.
//! * [`orchestrator`]: seeded training sessions, logs and checkpoints.
//! * [`checkpoint`]: the versioned binary checkpoint container.
//! * [`evalkit`]: deviation experiments, gain tables, phase portraits.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

// Negated comparisons such as `!(x > 0)` are how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod checkpoint;
pub mod evalkit;
pub mod market;
pub mod netcore;
pub mod orchestrator;
pub mod replay;
pub mod scalar;

pub use scalar::Scalar;

pub type Agent32 = agent::Agent<f32>;
pub type Agent64 = agent::Agent<f64>;
pub type Market32 = market::Market<f32>;
pub type Market64 = market::Market<f64>;
pub type MarketParams64 = market::MarketParams<f64>;
pub type Mlp32 = netcore::Mlp<f32>;
pub type Mlp64 = netcore::Mlp<f64>;
pub type ReplayBuffer32 = replay::ReplayBuffer<f32>;
pub type ReplayBuffer64 = replay::ReplayBuffer<f64>;
pub type Session32 = orchestrator::Session<f32>;
pub type Session64 = orchestrator::Session<f64>;
pub type Checkpoint32 = orchestrator::Checkpoint<f32>;
pub type Checkpoint64 = orchestrator::Checkpoint<f64>;
