//! Asynchronous, adversary-tolerant federated mean estimation.
//!
//! A server keeps an estimate `x` of a latent mean and a per-node copy `y` of
//! the latest observation. Each round it queries one node, smooths that
//! node's sample into `y` and moves `x` by a sign step along the node's row.
//! The core is generic over [`Scalar`] (`f32`/`f64`); the robustness linear
//! programs also run over exact rationals.

pub mod adversary;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod model;
pub mod net;
pub mod robustness;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{LpField, Scalar};

pub type Matrix = model::ObservationMatrix<f64>;
pub type Problem = model::ProblemSpec<f64>;
pub type Schedule = model::StepSchedule<f64>;
pub type SimState = model::State<f64>;
pub type Truth = model::GroundTruth<f64>;
pub type Config = engine::SimConfig<f64>;
pub type Run = engine::Trajectory<f64>;
pub type Verdict = robustness::RobustnessVerdict<f64>;
pub type Rational = num_rational::BigRational;
