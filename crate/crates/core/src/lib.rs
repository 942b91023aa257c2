//! Low-rank adapters with per-step rank pruning (DropLoRA) and a plain LoRA
//! baseline, built on a small reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run tape.
//! - [`adapters`]: adapter initialization, rank masks, masked forward, merge.
//! - [`nets`]: host networks exposing projections as adapter targets.
//! - [`training`]: AdamW with linear warmup/decay and the training loop.
//! - [`experiments`]: synthetic recovery tasks, sweeps, subspace diagnostics.
//! - [`io`]: run configuration, checkpoints and CSV output.
//!
//! Data-parallel loops live in [`par`] and run on rayon when the `parallel`
//! feature is enabled.

pub mod adapters;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod nets;
pub mod par;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod training;

pub use adapters::{AdapterConfig, LowRankAdapter, Method, Mode, RankMask};
pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
