//! Desk-scale unified image understanding / generation / editing pipeline.
//!
//! A causal transformer predicts continuous image embeddings inside a shared
//! embedding space (prefilled autoregression), and toy flow-matching decoders
//! turn those embeddings back into pixels. Everything runs on a minimal
//! reverse-mode autodiff engine over `f32` tensors, trained in three stages
//! on a procedurally generated corpus of colored-shape scenes.
//!
//! Module map:
//! - [`numerics`]: tensors, the op tape, backward, finite-difference oracle, RNG
//! - [`embedding`]: patch arithmetic, toy vision encoder, image I/O
//! - [`ar`]: mixed text/image sequences and the autoregressive core
//! - [`objectives`]: CE / MSE / cosine composite and the flow-matching loss
//! - [`decoder`]: velocity transformer, Euler sampler, classifier-free guidance
//! - [`data`]: scene grammar, captions, QA, edit pairs, corpus manifests
//! - [`trainer`]: stage schedules, AdamW, checkpoints
//! - [`config`] / [`ablate`] / [`report`]: CLI surface and ablation reports

pub mod ablate;
pub mod ar;
pub mod config;
pub mod data;
pub mod decoder;
pub mod embedding;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod report;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
