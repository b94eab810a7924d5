//! Transceiver design for multi-cluster over-the-air computation (AirComp).
//!
//! Each cluster's fusion center recovers the sum of its devices' symbols
//! from a superposed multi-antenna signal, while transmissions from other
//! clusters act as interference. This crate provides:
//!
//! - [`scenario`]: Rician-fading network generation and a binary scenario format.
//! - [`metrics`]: per-cluster MSE, AirComp rate and the weighted-sum objective.
//! - [`ao`]: alternating optimization with closed-form receive beamforming and
//!   successive convex approximation for the transmit scalars.
//! - [`autodiff`] and [`model`]: an unfolded graph neural network that replaces
//!   the transmit-scalar optimization with learned message passing.
//! - [`trainer`]: unsupervised training of the unfolded model.
//! - [`baselines`]: full-power and adaptive-power transmission.

pub mod ao;
pub mod autodiff;
pub mod barrier;
pub mod baselines;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod trainer;

pub use linalg::{CMat, CVec, C64};
pub use metrics::{RateReport, TransceiverStrategy};
pub use scenario::{NetworkRealization, ScenarioConfig};
