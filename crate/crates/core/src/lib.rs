//! Divide-and-Contrast self-supervised pretraining on a single CPU.

pub mod augment;
pub mod cluster;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
