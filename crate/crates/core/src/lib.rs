//! Meta-learning ensemble toolkit.
//!
//! Trains per-domain few-shot base learners (prototypical networks and
//! first-order MAML), then trains a weight prediction network (WPN) that
//! task-adaptively mixes their predictions. Built on a small dense-tensor
//! engine with reverse-mode automatic differentiation.

#![forbid(unsafe_code)]

pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod learners;
pub mod mixture;
pub mod rng;
pub mod tensor;
pub mod wpn;

pub use error::{Error, Result};
