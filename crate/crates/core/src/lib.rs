//! Deeply supervised multitask 3D autoencoder (DSMT-AE) for brain-age
//! regression.
//!
//! The crate is organised around the stages of an experiment:
//!
//! * [`volume`] loads, preprocesses, augments and synthesises 3D volumes
//!   with age/sex labels, and produces stratified train/validation splits.
//! * [`nn`] holds the small CPU tensor engine (3D convolutions, batch
//!   normalisation, dense layers) with hand-written backward passes.
//! * [`model`] builds the residual encoder/decoder with its bottleneck
//!   heads and the four ablation variants.
//! * [`losses`] is the composite objective and its gradient with respect to
//!   the model outputs.
//! * [`ensemble`] combines the final and shallow age heads at inference.
//! * [`trainer`] runs optimisation, early stopping, grid search and the
//!   finite-difference gradient check.
//! * [`evaluation`] computes metrics, stratified reports, ablation tables
//!   and plots.

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
