//! Multiplexed measurement-device-independent conference key agreement.
//!
//! Users send heralded single photons to an untrusted relay that groups one
//! photon per user and projects the group with a linear-optics GHZ analyser.
//! This crate holds the device and protocol parameters, the analyser model,
//! the heralding/multiplexing stage, the analytic key-rate engine, a seeded
//! Monte Carlo simulator of the whole protocol and classical postprocessing.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod error;
pub mod multiplex;
pub mod params;
pub mod postprocess;
pub mod rate;
pub mod sim;

pub use error::{Error, Result};
pub use params::{ConfigDocument, DeviceParams, EpsilonBudget, EtaAMode, ProtocolConfig};
