//! Class-dropping training and adaptation of embedding extractors on a
//! synthetic speaker-verification task.

// NaN-rejecting checks are written `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod corpus;
pub mod dd;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod real;
pub mod reference;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
