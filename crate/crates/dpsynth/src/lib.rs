//! Differentially private synthetic microdata release for a binned birth
//! registry, with budget accounting, candidate-model selection, acceptance
//! criteria, and rare-record suppression.

pub mod corpus;
pub mod criteria;
pub mod data;
pub mod dp;
pub mod error;
pub mod matching;
pub mod pipeline;
pub mod projection;
pub mod schema;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
