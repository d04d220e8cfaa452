//! Toy-scale multi-task driving perception: object detection, drivable-area
//! and lane-line segmentation with quantization-aware training.

pub mod augment;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod labelprep;
pub mod losses;
pub mod network;
pub mod postprocess;
pub mod quant;
pub mod toyset;
pub mod trainer;

pub use error::{Error, Result};
