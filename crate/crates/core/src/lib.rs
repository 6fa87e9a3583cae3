#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embaseline;
pub mod error;
pub mod geometry;
mod nn;
pub mod pipeline;
pub mod synthvideo;
pub mod tracker;
pub mod tuegen;

pub use error::{Error, Result};
