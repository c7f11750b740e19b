//! Self-supervised audio representation learning toolkit.
//!
//! End-to-end pipeline: WAV ingestion and log-mel features, spectrogram
//! augmentations, a dual online/target network trained with alignment,
//! diversity, and decorrelation losses, plus linear-probe evaluation.
//! Everything runs on an exact reverse-mode autodiff engine whose gradients
//! are verifiable against finite differences.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod manifest;
pub mod mel;
pub mod network;
pub mod ops;
pub mod probe;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
pub use tensor::Tensor;
