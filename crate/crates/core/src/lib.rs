//! Desk-scale continual pre-training laboratory.
//!
//! Pipeline: generate a synthetic bilingual corpus pair, score parameter
//! importance on source calibration data, build a column-wise freeze mask,
//! continually pre-train on the target corpus with masked updates, and
//! measure source retention against target acquisition.

pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod importance;
pub mod masking;
pub mod trainer;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
