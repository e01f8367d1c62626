//! A discrete-event simulation laboratory for asynchronous SGD under data
//! and system heterogeneity.
//!
//! The crate simulates a parameter server that applies worker gradients the
//! moment they arrive. Workers differ both in their local objectives and in
//! how long they take to compute a stochastic gradient, which makes plain
//! asynchronous SGD drift toward an update-frequency-weighted surrogate
//! objective instead of the equal-weighted one. The lab implements the
//! stepsize rescaling that removes this inconsistency, alongside vanilla and
//! delay-adaptive stepsize rules and three synchronous-ish baselines
//! (naive minibatch, malenia, ringleader), and ships the numerical machinery
//! to decompose every simulated cycle into an ideal gradient step, a
//! staleness bias, and a zero-mean noise term.
//!
//! Module map:
//!
//! - [`timing`] — worker speed profiles, harmonic-period tools, cycle plans
//! - [`objectives`] — local objectives, gradient oracles, heterogeneity diagnostics
//! - [`data`] — synthetic classification data, label partitioning, IDX files
//! - [`engine`] — the deterministic event-driven simulator and its traces
//! - [`algorithms`] — stepsize policies and server strategies
//! - [`analysis`] — cycle decomposition, target weights, complexity terms
//! - [`experiments`] — experiment configs, sweeps, aggregation, presets
//!
//! Every source of randomness is a counter-based stream keyed by
//! `(seed, purpose, worker, index)`, so runs are reproducible bit-for-bit and
//! independent of event interleaving. See `examples/` for runnable entry
//! points into each capability, or the `asgd-lab` binary for the CLI.

pub mod algorithms;
pub mod analysis;
pub mod data;
pub mod engine;
pub mod experiments;
pub mod objectives;
pub mod rng;
pub mod timing;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no workers")]
    NoWorkers,
    #[error("computation times must be positive and finite")]
    InvalidTau,
    #[error("harmonic periods required")]
    NonHarmonic,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights must be nonnegative and sum to 1 (sum deviates by {0:e})")]
    BadWeights(f64),
    #[error("curvature must be positive semidefinite")]
    NotPsd,
    #[error("diverged iterate: non-finite model values")]
    DivergedIterate,
    #[error("empty batch")]
    EmptyBatch,
    #[error("label/worker mismatch: {classes} classes for {workers} workers")]
    LabelWorkerMismatch { classes: usize, workers: usize },
    #[error("not IDX: {0}")]
    NotIdx(String),
    #[error("truncated")]
    Truncated,
    #[error("cycles undefined for fluctuating timing")]
    CyclesUndefined,
    #[error("decomposition needs exact local gradients")]
    NeedsExactGradients,
    #[error("trace does not record per-event vectors; enable record_vectors")]
    MissingTraceVectors,
    #[error("no stable stepsize: every grid point diverged")]
    NoStableStepsize,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
