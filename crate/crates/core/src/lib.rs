//! Hierarchical semantic-tree concept whitening.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod data;
pub mod error;
pub mod hcw;
pub mod linalg;
pub mod net;
pub mod qopt;
pub mod rng;
pub mod sc_loss;
pub mod tensor;
pub mod trainer;
pub mod tree;

pub use error::{HcwError, Result};
