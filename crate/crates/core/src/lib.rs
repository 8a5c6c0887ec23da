//! Core numerics for a mobile-level vision transformer.
//!
//! The crate is `no_std` (it needs `alloc`) and covers everything that is
//! pure computation:
//!
//! - [`tensor`] and [`autodiff`]: a float64 tensor and a tape-based
//!   reverse-mode differentiator, with [`gradcheck`] as its oracle.
//! - [`embed`]: naive, convolutional and irregular (multi-branch) patch
//!   embeddings built from inverted-residual blocks with squeeze-excitation.
//! - [`transformer`]: uniform pre-norm attention/MLP blocks with DropPath.
//! - [`merge`]: class-token, average-pool and adaptive patch merging readouts.
//! - [`config`], [`model`]: presets, ablation variants and the full classifier.
//! - [`flops`]: a static multiply-accumulate and parameter auditor.
//! - [`optim`], [`loss`]: AdamW, the warmup/cosine schedule and
//!   label-smoothed cross entropy.
//! - [`checkpoint`]: the binary parameter container.
//!
//! File IO, datasets, the training loop and the command line live in the
//! `mobivit` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod loss;
pub mod merge;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Gradients, Graph, Var};
pub use config::{EmbedConfig, MergeMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{build_model, ForwardMode, Model};
pub use nn::{ParamId, ParamStore};
pub use tensor::Tensor;
