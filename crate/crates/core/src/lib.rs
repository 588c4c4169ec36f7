//! Lane-aware graph attention network for multi-vehicle trajectory
//! prediction in expressway merge zones.
//!
//! The crate is organised along the pipeline:
//!
//! - [`trajectory`]: in-memory trajectory model, windowing and splitting
//! - [`ingest`]: canonical CSV parsing and 10 Hz SI harmonization
//! - [`graph`]: per-frame interaction graphs and 30-frame graph sequences
//! - [`nn`]: tensors, BiLSTM encoder, lane-biased attention layers, decoders
//! - [`train`]: losses, AdamW, plateau scheduling, pre-train / fine-tune runs
//! - [`eval`]: displacement and surrogate safety metrics, report tables
//! - [`synth`]: deterministic merge-zone scenario generator
//! - [`config`] and [`cli`]: flat key/value configuration and the command front end

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod nn;
pub mod synth;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
