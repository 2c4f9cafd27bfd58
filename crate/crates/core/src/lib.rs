//! Hierarchical predictive learning for tube navigation.
//!
//! Past executions of a demonstrator train Gaussian-process strategy models.
//! At run time the models predict where the system should be a few steps
//! ahead; those predictions become target sets for a shifting-horizon MPC, and
//! a safety controller takes over whenever no target set is reachable.

// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;
pub mod dynamics;
pub mod environment;
pub mod execution;
pub mod gp;
pub mod harness;
pub mod mpc;
pub mod qp;
pub mod safety;
mod serde_ext;
pub mod strategy;
