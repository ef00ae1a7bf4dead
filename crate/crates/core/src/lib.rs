#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod data;
pub mod error;
pub mod lifting;
pub mod linalg;
pub mod plants;
pub mod prediction;
pub mod qp_layer;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
