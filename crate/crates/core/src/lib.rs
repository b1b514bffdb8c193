//! Geo-coordinate supervised domain adaptation for semantic segmentation.

pub mod class_balance;
pub mod config;
pub mod data;
pub mod error;
pub mod geo_encoding;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
