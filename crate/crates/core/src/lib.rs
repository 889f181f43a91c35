//! Online probe allocation for network tomography.
//!
//! Classical loss networks are probed with unicast paths; quantum bit-flip
//! star networks with root-independent multicast probes. The [`policies`]
//! module holds OPAL and its baselines, [`harness`] the Monte Carlo runner.

pub mod error;
pub mod estimators;
pub mod harness;
pub mod oed;
pub mod policies;
pub mod probes;
pub mod topology;

pub use error::{Error, Result};
