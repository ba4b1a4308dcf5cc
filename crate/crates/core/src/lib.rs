//! R2AU-Net crack segmentation engine: a small differentiable backend, the
//! recurrent-residual attention U-Net, dice-loss training, confidence-ranked
//! few-shot refinement, and the evaluation statistics around it.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
