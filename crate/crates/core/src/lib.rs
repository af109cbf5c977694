//! Desk-scale toolkit for zero-shot cross-lingual generation experiments.
//!
//! The crate bundles a byte-level subword tokenizer, synthetic cipher
//! languages, SP-Rouge scoring, an n-gram language identifier and a small
//! encoder-decoder transformer trained with soft prompts.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod langid;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod textops;
pub mod tokenizer;
pub mod util;

pub use error::{Error, Result};
