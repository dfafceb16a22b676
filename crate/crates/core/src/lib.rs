//! Simulator for faithful federated learning mechanisms.
//!
//! The crate covers the FFL mechanism (federated gradient descent plus
//! incremental VCG-style payments), its differentially private cluster-based
//! variant, exact VCG oracles, synthetic scenario generators and the
//! analytic risk and payment bounds that accompany the mechanisms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod bounds;
pub mod datagen;
pub mod distribution;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod ffl;
pub mod mechanism;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod verify;

pub use error::{FflError, Result};
