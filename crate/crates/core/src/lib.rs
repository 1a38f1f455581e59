//! Conditional prompt generation for a frozen encoder–decoder transformer.
//!
//! A production-system style generator turns textual conditions
//! (instructions, metadata, input text) into continuous key/value prompts.
//! Each condition sparsely selects `k` of `N` attention-head rules, picks a
//! context condition, and the selected rules rewrite the condition sequence
//! into prompt vectors that are prepended to the frozen model's attention.

pub mod baselines;
pub mod checkpoint;
pub mod condenc;
pub mod error;
pub mod harness;
pub mod numkernel;
pub mod optim;
pub mod par;
pub mod params;
pub mod plm;
pub mod props;
pub mod rng;
pub mod tasks;
pub mod theory;

pub use error::{Error, Result};
