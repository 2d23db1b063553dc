//! Dead-reckoning from low-cost IMU data with a spiking-network-adapted
//! invariant extended Kalman filter.
//!
//! # Overview
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`datasets`] ingests real OXTS logs or synthesizes sequences whose
//!    ground truth is exactly reproducible by the filter's integrator, and
//!    [`imu_model`] corrupts clean measurements with a deterministic
//!    scale/misalignment/bias/noise model.
//! 2. [`inekf`] runs a right-invariant extended Kalman filter over the
//!    samples, propagating an extended state (attitude, velocity, position,
//!    IMU biases, mounting extrinsics) and applying zero-lateral/vertical
//!    velocity pseudo-measurements.
//! 3. [`snn`] maps a sliding window of measurements to a 14-dimensional
//!    output that re-parameterizes the per-axis measurement correction and
//!    the pseudo-measurement noise, using a spiking transformer trained by
//!    [`trainer`] with surrogate gradients back-propagated through the
//!    filter rollout itself (see [`autodiff`]).
//! 4. [`evalmetrics`] scores trajectories with relative translation /
//!    rotation error over 100..800 m subsequences.
//!
//! # Conventions
//!
//! * World frame is a local ENU tangent plane; gravity is `(0, 0, g)` and is
//!   subtracted during velocity integration.
//! * Rotations are stored as matrices ([`geom3d::Rotation`]); quaternions
//!   appear only in the trajectory interchange format and test oracles.
//! * All randomness flows through explicitly seeded ChaCha8 streams so every
//!   artifact is byte-reproducible from its config.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evalmetrics;
pub mod geom3d;
pub mod imu_model;
pub mod inekf;
pub mod pipeline;
pub mod rng;
pub mod snn;
pub mod trainer;

pub use datasets::Trajectory;
pub use error::CoreError;
pub use evalmetrics::MetricReport;
pub use geom3d::{Mat3, Rotation, Vec3};
pub use imu_model::{Correction, CorruptionSpec, ErrorModel, ImuSample};
pub use inekf::{Covariance, Filter, FilterParams, FilterState, NoiseSchedule, RunResult};
pub use snn::{LifParams, NetConfig, NetOutput, ParamStore};
pub use trainer::{TrainConfig, Trainer};
