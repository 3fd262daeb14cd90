//! Dataset-provenance classification for LLM pretraining corpora.
//!
//! Train classifiers that tell which dataset a text sequence came from,
//! evaluate them under several test protocols, apply text transforms
//! (format stripping, LLM rewriting, thematic categorization), and estimate
//! the pretraining mixture of a language model from the sequences it
//! generates.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mixture;
pub mod model;
pub mod packing;
pub mod tokenizer;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
