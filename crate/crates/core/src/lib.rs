//! Multi-domain learning over a frozen convolutional trunk with per-domain
//! searched adapter structures and plugging locations.

pub mod adapter;
pub mod autodiff;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod plugging;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod trunk;

pub use error::{Error, Result};
