//! Compute-budgeted canvas planning for diffusion language models.
//!
//! A diffusion LLM allocates a fixed response canvas before it starts
//! denoising, and every position of that canvas costs compute on every step
//! whether or not it ends up holding a meaningful token. This crate models
//! that cost exactly, learns to predict per-prompt response lengths, sizes
//! the canvas with a calibrated safety margin, and simulates the retry
//! behaviour of competing canvas-sizing strategies.
//!
//! Module map:
//!
//! - [`cost_model`]: integer FLOP accounting per transformer block and per inference.
//! - [`dataset`]: JSONL ingestion, tokenization, splits, statistics, synthetic corpora.
//! - [`predictor`]: hashed n-gram features and a least-squares gradient-boosted tree ensemble.
//! - [`calibration`]: safety margin from positive residuals, effective canvas length.
//! - [`strategies`]: per-record attempt simulation with fallback semantics.
//! - [`harness`]: strategy sweeps, reports, the bimodal experiment and latency profiles.

pub mod calibration;
pub mod cost_model;
pub mod dataset;
mod error;
pub mod harness;
pub mod predictor;
pub mod strategies;

pub use error::{Error, Result};

/// Length in tokens.
pub type Tokens = u32;

/// Exact floating-point operation count.
pub type Flop = u128;

/// One TFLOP, used when reporting human-readable totals.
pub const FLOP_PER_TFLOP: f64 = 1e12;
