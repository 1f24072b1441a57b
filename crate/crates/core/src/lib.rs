//! Fully differentiable ordinal regression for monocular depth estimation.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ordhead;
pub mod selfcheck;
pub mod sid;
pub mod train;

pub use error::{Error, Result};
