//! Activation offloading for transformer training.
//!
//! The crate has two halves. The analytical half ([`activation`], [`perf`],
//! [`rok`]) estimates activation footprints, step times, required SSD write
//! bandwidth and drive lifespan from a model description. The engine half
//! ([`cache`], [`storage`], [`harness`]) implements the offload lifecycle
//! itself: tensors saved for backward are spilled to storage during the
//! forward pass and prefetched back in reverse order during backward, driven
//! by a synthetic training loop.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod cache;
pub mod cli;
pub mod config;
pub mod harness;
pub mod layer;
pub mod manifest;
pub mod perf;
pub mod rok;
pub mod storage;
pub mod trace;
