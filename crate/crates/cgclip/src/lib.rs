//! Caption-guided contrastive training and retrieval for video person
//! re-identification, exercised end to end on a synthetic attribute-identity
//! corpus.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode
//!   differentiation and finite-difference gradient checking.
//! - [`nn`]: transformer building blocks (linear, layer norm, multi-head
//!   attention, feed-forward) shared by every encoder.
//! - [`model`]: miniature image/text encoder pair plus the contrastive
//!   pretraining stage that produces the frozen encoder snapshots.
//! - [`data`]: synthetic corpus generation, on-disk dataset format, PK batch
//!   sampling.
//! - [`memory`]: identity memory banks and caption-guided memory refinement.
//! - [`tfe`]: token-based spatiotemporal feature extraction with fixed-length
//!   learnable tokens.
//! - [`objectives`]: contrastive, batch-hard triplet and label-smoothed
//!   cross-entropy losses.
//! - [`train`]: the end-to-end training loop with ablation switches.
//! - [`eval`]: retrieval ranking, mAP and CMC.
//! - [`bench`]: analytic MAC cost models and wall-clock scaling sweeps.
//!
//! See the crate `examples/` directory for a runnable walkthrough of each
//! capability, and the `cgclip` binary for the file-based CLI.

pub mod data;
pub mod eval;
pub mod memory;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod tfe;

mod error;

pub use error::{Error, Result};
