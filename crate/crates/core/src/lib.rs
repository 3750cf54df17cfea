//! Simulation and analysis toolkit for differential item functioning (DIF)
//! in computerized adaptive tests.
//!
//! The pipeline runs bottom-up through the modules: [`irt`] scoring, [`pool`]
//! generation, [`cat`] administration, [`prep`] cleaning into nested frames,
//! single-level [`glm`] and two-level [`glmm`] logistic DIF models, and the
//! Monte Carlo [`harness`]. [`config`] and [`report`] hold the file formats.

pub mod cat;
pub mod config;
pub mod error;
pub mod glm;
pub mod glmm;
pub mod harness;
pub mod irt;
pub mod model;
pub mod optim;
pub mod pool;
pub mod prep;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
