//! Scale-aware competitive network (SAC-Net) for palmprint verification.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] – dense f64 tensors with a tape-based reverse-mode autodiff graph.
//! * [`gabor`] – learnable Gabor filter banks.
//! * [`attention`] – multi-head self-attention over feature-map positions.
//! * [`competition`] – softmax competitive coding within and across scales,
//!   plus the classical CompCode argmin baseline.
//! * [`model`] – the three-branch network, loss, Adam, training and checkpoints.
//! * [`verify`] – genuine/impostor scoring, ROC, EER and report files.
//! * [`data`] – image ingestion and the synthetic palmprint-texture generator.
//! * [`pipeline`] – train, evaluate, baseline and ablation runs.
//! * [`cli`] – the `sacnet` command line.

pub mod attention;
pub mod cli;
pub mod competition;
pub mod data;
pub mod error;
pub mod gabor;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
