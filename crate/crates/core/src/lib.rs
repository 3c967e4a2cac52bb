//! Long-format targeted maximum likelihood estimation of counterfactual
//! cumulative risks under dynamic threshold treatment regimes.

pub mod analysis;
pub mod coarsen;
pub mod data;
pub mod error;
pub mod inference;
pub mod ipw;
pub mod learners;
pub mod oracle;
pub mod propensity;
pub mod regimes;
pub mod superlearner;
pub mod tmle;

pub use error::{Error, Result};
