//! Bidirectional gated state-space models for masked language modeling.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: dense tensors, radix-2 FFT, a seeded RNG and a reverse-mode tape.
//! * [`ssm`]: diagonal (S4D) state-space layers, discretization, kernels, scan and FFT convolution.
//! * [`model`]: gated and stacked blocks with SSM or attention routing, embeddings, MLM head, checkpoints.
//! * [`pretrain`]: vocabulary, offline masking, shards, AdamW, schedules, the training loop and length extension.
//! * [`analysis`]: kernel dumps, FLOP estimation and routing probes.
//! * [`cli`]: the `bigs` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod analysis;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod ssm;

pub use error::{Error, Result};
