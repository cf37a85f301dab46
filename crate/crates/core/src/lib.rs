//! Inference-aware differentiable architecture search.
//!
//! A [`supernet::SuperNet`] mixes candidate blocks per layer with
//! Gumbel-Softmax coefficients. The search trims it three ways: each
//! inverted bottleneck's hidden width is searched by a pair of shared-weight
//! candidates whose masks converge ([`prunode`]), improbable blocks are
//! removed on a rising threshold, and removable layers get a skip candidate
//! ([`pruning`]). A latency lookup table ([`latency`]) makes the expected
//! latency part of the loss.

pub mod data;
pub mod error;
pub mod grid;
pub mod io;
pub mod latency;
pub mod prunode;
pub mod pruning;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
