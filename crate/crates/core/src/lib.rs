//! Multirate model-predictive dispatch of distributed energy resources for
//! frequency and voltage ancillary services in radial distribution feeders.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod der_fleet;
pub mod error;
pub mod estimation;
pub mod frequency_services;
pub mod grid_model;
pub mod mpc_controller;
pub mod powerflow;
pub mod qp_solver;
pub mod scenario;
pub mod simulator;
pub mod verify;

pub use error::{Error, Result};
