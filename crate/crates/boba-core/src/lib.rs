//! Byzantine-robust aggregation under label skew.
//!
//! The crate bundles a two-stage subspace aggregator (fit the honest affine
//! subspace, then estimate each client's label distribution against
//! server-held class gradients), the usual robust baselines, six gradient
//! attacks, synthetic label-skew data and a small federated simulator.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod linalg;
pub mod aggregation;
pub mod config;
pub mod attacks;
pub mod bench;
pub mod datagen;
pub mod fedsim;
pub mod gradfile;
pub mod instances;
pub mod metrics;
pub mod verify;
mod subsets;
