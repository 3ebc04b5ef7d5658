//! Experiment library for studying learning plateaus of in-context learning
//! in small causal transformers.
//!
//! A sequence task interleaves example tokens `[x1, y1, ..., xL, yL]`; the
//! label of every example is determined by a per-sequence hidden factor and a
//! per-sequence mapping from factor values to labels, so the model must infer
//! both from context. The crate provides:
//!
//! - [`numerics`]: a tape based reverse-mode autodiff engine with a
//!   finite-difference gradient checker,
//! - [`tasks`]: synthetic hidden-factor, sign-classification and word
//!   selection sequence generators with a frozen injective encoder,
//! - [`model`]: a small causal transformer built on the tape,
//! - [`training`]: sequence losses, auxiliary losses, Adam, and the training
//!   strategies (warm up, mixed, extra losses),
//! - [`probes`]: linear probes for the weights/context component scores,
//! - [`analysis`]: transition detection, plateau statistics, rank
//!   correlation, sweep summaries,
//! - [`construction`]: an exact hand-built relaxed transformer that solves
//!   the factored task, its integer-signature semantic simulator, closed-form
//!   performance curves, and a Monte-Carlo oracle adjudicating them,
//! - [`runner`] / [`archive`]: run configs, deterministic on-disk artifacts,
//!   and the operations behind the CLI subcommands.
//!
//! With the default `parallel` feature, data-parallel inner loops shard over
//! rayon; disabling it falls back to sequential loops with bit-identical
//! results (reductions always run in index order).

pub mod analysis;
pub mod archive;
pub mod construction;
pub mod error;
pub mod model;
pub mod numerics;
pub(crate) mod par;
pub mod probes;
pub mod runner;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
