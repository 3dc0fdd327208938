//! Multimodal survival prediction from pathology phenotype features and
//! gene-module features.
//!
//! The crate is `no_std` (with `alloc`) and contains the whole numerical
//! pipeline: a small reverse-mode tensor engine, phenotype and gene-module
//! encoders, the two-stream co-attention transformer, multi-head attention
//! pooling with top-rank masking, the Cox risk head, survival metrics and the
//! cross-validation training loop. File formats, checkpoints on disk and the
//! command-line harness live in the `survfuse` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod cv;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kmeans;
pub mod metrics;
pub mod mhap;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tsmcat;

pub use config::{ModelConfig, OptimConfig, RunConfig, TieRule, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use tensor::Tensor;
