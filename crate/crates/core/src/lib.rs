//! Testing for differential treatment of the same person across encounters
//! in which their race is perceived differently.
//!
//! The pipeline is:
//!
//! 1. [`ingest`]: per-state raw tables to canonical [`ingest::StopRecord`]s.
//! 2. [`linkage`]: exact composite-key grouping into [`linkage::DriverPanel`]s.
//! 3. [`cohort`]: nested subsets down to drivers perceived as both white
//!    and Hispanic, with descriptive statistics.
//! 4. [`estimators`]: person fixed-effects estimates of the change in
//!    treatment probability when perceived race changes, with
//!    driver-clustered inference.
//! 5. [`sim`]: a generative model of perception and search decisions with
//!    known bias, used to validate the estimators.

pub mod cohort;
pub mod error;
pub mod estimators;
pub mod ingest;
pub mod linalg;
pub mod linkage;
pub mod panel_io;
pub mod pipeline;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
