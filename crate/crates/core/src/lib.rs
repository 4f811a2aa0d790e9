//! Bayesian MMSE state estimation for unobservable distribution systems.

pub mod grid;
pub mod powerflow;
pub mod injection;
pub mod sampling;
pub mod nn;
pub mod pruning;
pub mod baddata;
pub mod wls;
pub mod experiment;
