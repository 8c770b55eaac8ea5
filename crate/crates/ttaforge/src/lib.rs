//! Test-time adaptive object detection on corrupted image streams.
//!
//! A frozen detector is adapted online, one unlabeled test batch at a time,
//! by tuning only small prompt tensors under a mean-teacher self-training
//! loop. A per-category instance memory collects high-quality pseudo-labels
//! from the stream and feeds two strategies: enhancing predictions with
//! feature-prototype affinities, and hallucinating positives onto images
//! that produced no usable pseudo-labels.
//!
//! The crate ships deterministic toy backends (`backend`), a synthetic
//! shape-detection benchmark (`data`), weak/strong/corruption augmentations
//! (`augment`), the adaptation engine (`adapt`), and a detection evaluation
//! kit (`evalkit`). Every module is seeded and reproducible.
//!
//! ## Examples
//!
//! One runnable walkthrough per capability:
//!
//! ```text
//! cargo run --example warm_start          prompt initialization from the first image
//! cargo run --example ema_teacher         teacher EMA dynamics
//! cargo run --example gradient_check      analytic vs finite-difference gradients
//! cargo run --example instance_memory     queues, prototypes, sampling, dumps
//! cargo run --example memory_enhance      affinity-based score re-sorting
//! cargo run --example memory_hallucinate  instance pasting with overlay dumps
//! cargo run --example augmentations       weak/strong pipelines + corruptions
//! cargo run --example synthetic_data      benchmark generation and reload
//! cargo run --example evaluate            matching, AP, PR, TP/FP histograms
//! cargo run --example prompt_checkpoints  binary container I/O
//! cargo run --release --example adapt_stream   full online adaptation run
//! ```
//!
//! The `ttaforge` binary wraps the same machinery as `gen`, `run`, and
//! `eval` subcommands; see the README for the CLI surface and file formats.

pub mod adapt;
pub mod augment;
pub mod backend;
pub mod cli;
pub mod container;
pub mod core;
pub mod data;
pub mod enhance;
pub mod error;
pub mod evalkit;
pub mod hallucinate;
pub mod memory;
pub mod prompts;
pub mod tensor;

pub use error::{Result, TtaError};
