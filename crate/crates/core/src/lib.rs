//! Masked-prediction speech encoder pretraining with k-means pseudo-labels,
//! iterative self-distillation into shallow and thin students, and frozen
//! encoder probes.

pub mod cli;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod features;
pub mod io;
pub mod probes;
pub mod quantizer;

pub use error::{Error, Result};
