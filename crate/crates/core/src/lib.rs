//! Minimum-Bayes-risk preference data and DPO fine-tuning for a small
//! conditional language model, built from scratch on a tape autodiff.

pub mod autodiff;
pub mod decoding;
pub mod dpo;
pub mod error;
pub mod harness;
pub mod mbr;
pub mod model;
pub mod optim;
pub mod preference;
pub mod records;
pub mod tasks;

pub use error::{Error, Result};
