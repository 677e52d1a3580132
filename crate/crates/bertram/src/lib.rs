//! A desk-scale laboratory for rare-word input representations.
//!
//! The crate trains a miniature masked-language-model encoder from scratch,
//! learns embeddings for rare words from their surface form (character
//! n-grams) and their contexts (read through the frozen encoder), rarifies
//! classification datasets by swapping decision-critical words for rare
//! synonyms, and evaluates the learned embeddings with cloze probing and
//! downstream injection.
//!
//! Modules map onto the pipeline:
//! - [`math`]: tensors, reverse-mode autodiff, Adam, checkpoints
//! - [`text`]: corpus ingestion, wordpiece vocabulary, n-grams, contexts
//! - [`encoder`]: the small transformer encoder and its MLM pretraining
//! - [`model`]: form/context embedding model and its three-stage trainer
//! - [`rarify`]: dataset splitting, baseline finetuning, test-set generation
//! - [`harness`]: probing, injection, downstream evaluation, reports
//! - [`toy`]: synthetic corpus/lexicon/probe generator for experiments

pub mod cli;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod math;
pub mod model;
pub mod rarify;
pub mod text;
pub mod toy;
pub mod util;

pub use error::{Error, Result};
