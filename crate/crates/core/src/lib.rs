//! Coarse-to-fine multi-task visual grounding: one encoder, a coarse box and mask stage, a
//! mask-guided interaction module and a fine stage tied together by consistency losses.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod mim;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rci;
pub mod rle;
pub mod rsp;
pub mod text;

pub use error::{Error, Result};
