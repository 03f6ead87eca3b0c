//! Learned exponential control barrier function safety filters.
//!
//! The crate is generic over the scalar type ([`Real`], implemented for `f32`
//! and `f64`); the `*64` aliases below fix it to double precision, which is
//! what the experiments and the CLI use.

pub mod alpha_net;
pub mod autodiff;
pub mod barrier;
pub mod controllers;
pub mod dynamics;
pub mod experiments;
pub mod export;
pub mod linalg;
pub mod qp;
pub mod scalar;
pub mod training;

pub use scalar::Real;

pub type Mat64 = linalg::Mat<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type QpProblem64 = qp::QpProblem<f64>;
pub type QpSolution64 = qp::QpSolution<f64>;
pub type QuadraticForm64 = barrier::QuadraticForm<f64>;
pub type EnvironmentInfo64 = barrier::EnvironmentInfo<f64>;
pub type EcbfCascade64 = barrier::EcbfCascade<f64>;
pub type System64 = dynamics::LinearCtrlAffineSystem<f64>;
pub type Trajectory64 = dynamics::Trajectory<f64>;
pub type LqrController64 = controllers::LqrController<f64>;
