//! Desk-scale mask-conditioned generation with preference-based fine-tuning.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`tasks`] defines a synthetic multi-task universe (fill / extend /
//!    removal over 1-D signals) with analytic per-dimension scorers.
//! 2. [`flowgen`] trains a conditional rectified-flow generator and samples
//!    it with an Euler solver and classifier-free guidance.
//! 3. [`prefdata`] turns generator candidates into best/worst preference
//!    pairs per evaluation dimension and persists them as JSONL.
//! 4. [`reward`] trains one pairwise, query-conditioned reward model across
//!    all tasks and dimensions (plus a scalar baseline for comparison).
//! 5. [`rlhf`] fine-tunes the generator against the frozen reward model
//!    with a hinge-bounded objective, fixed or EMA-updated reference.
//!
//! Everything below is deterministic given a root seed: randomness flows
//! through counter-based [`rng::RngStream`]s, and all parallel fan-out
//! reduces in fixed index order.

pub mod adam;
pub mod config;
pub mod error;
pub mod flowgen;
pub mod gradcheck;
pub mod integrity;
pub mod mlp;
pub mod params;
pub mod prefdata;
pub mod reward;
pub mod rlhf;
pub mod rng;
pub mod tasks;

pub use error::{CoreError, Result};

/// Fixed number of accumulation chunks for parallel batch reductions.
/// Chunk boundaries and reduction order never depend on the worker count,
/// so results are bitwise identical for any thread pool size.
pub(crate) const REDUCE_CHUNKS: usize = 8;
