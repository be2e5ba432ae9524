//! Trace-driven, deterministic simulator of synchronous federated learning
//! over clients with time-varying bandwidth.
//!
//! The crate is organised bottom-up:
//!
//! * [`trace`] and [`synth`]: bandwidth traces and transfer-time integration.
//! * [`predictor`]: next-round bandwidth forecasts and cohort normalization.
//! * [`learner`]: the synthetic non-IID task, local SGD and FedAvg/Yogi.
//! * [`selection`]: client utility and the random / utility-greedy selectors.
//! * [`scheduler`]: observation windows, prediction feedback and window sizing.
//! * [`engine`]: the synchronous round loop and its records.
//! * [`config`] and [`cli`]: experiment files, run matrices and reports.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod cli;
pub mod config;
pub mod engine;
pub mod learner;
pub mod predictor;
pub mod rng;
pub mod scheduler;
pub mod selection;
pub mod synth;
pub mod trace;

/// Client identifier; displayed as `c<N>`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}
