//! Low-rank compression engine for small convolutional networks.
//!
//! The pipeline: factorize convolution weights into pairs of cheaper
//! convolutions via truncated SVD (`lrspace`), search the per-layer candidate
//! space with a Gumbel-Softmax supernet (`search`), and recover accuracy with
//! synthetic-data knowledge distillation (`synth` + `distill`). `tensor`
//! provides the dense arithmetic and reverse-mode differentiation everything
//! else runs on; `graph` holds the network representation; `cost` the
//! FLOPs/latency accounting; `dataset` a deterministic procedural image set.

pub mod cost;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod graph;
pub mod io;
pub mod lrspace;
pub mod optim;
pub mod search;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
