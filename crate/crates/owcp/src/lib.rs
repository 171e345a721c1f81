//! Open-world encrypted-traffic classification.
//!
//! This crate implements a complete pipeline for classifying encrypted flows
//! under the open-world assumption — test traffic may come from applications
//! never seen in training, and the classifier must reject those as unknown
//! instead of forcing them into a known class. The stages:
//!
//! 1. [`flow`] — canonical flow records and line-delimited file I/O.
//! 2. [`tokenizer`] — frequency-ordered dictionary; flows become fixed-length
//!    `CLS + [NP] + SEP + [PL]` token sequences.
//! 3. [`encoder`] — a stacked multi-head-attention encoder producing one
//!    embedding per flow.
//! 4. [`pretrain`] — contrastive pre-training on resampled triplets with the
//!    InfoNCE objective.
//! 5. [`margins`] — per-class spherical prototypes, marginal-flow selection,
//!    and background-similarity filtering of TPL-homogeneous flows.
//! 6. [`gan`] — a generator/discriminator pair trained on the filtered
//!    marginal embeddings; samples simulated-unknown embeddings.
//! 7. [`classifier`] — the (k+1)-node head fine-tuned on known flows plus
//!    synthetic unknowns, with the two-stage thresholded decision rule.
//! 8. [`eval`] — dataset splitting, closed/open-world metrics, ablation
//!    switches, and the unknown-fraction sensitivity sweep.
//! 9. [`synth`] — synthetic corpus generation with controllable class
//!    separability and shared third-party backgrounds, so the whole pipeline
//!    is testable without captured datasets.
//! 10. [`pipeline`] — run configuration and stage orchestration shared by the
//!     CLI and the evaluation harness.
//!
//! The narrative guide lives in `book/`; its code snippets compile and run as
//! doc-tests of this crate.

pub mod classifier;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gan;
pub mod margins;
pub mod opt;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod tensorio;
pub mod tokenizer;

pub use error::{Error, Result};
