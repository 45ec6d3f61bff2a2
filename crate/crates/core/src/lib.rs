//! Hierarchical part-attention body regression with a diffusion prior over
//! global root trajectories.
//!
//! The crate is organised bottom-up: [`tensor`] provides the differentiable
//! array engine, [`body`] a small skinned body model, [`hierarchy`] and
//! [`camera`] the part tables and projection utilities, [`rope`] the
//! regression network, [`diffusion`] the trajectory denoiser, [`metrics`] the
//! evaluation suite and [`synth`] the deterministic data generators.

// `!(x > 0.0)` rejects NaN; `Var::add` and friends are fallible.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod body;
pub mod camera;
pub mod diffusion;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod nn;
pub mod rope;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
