//! Counterfactual explanations for image classifiers via guided denoising
//! diffusion, plus the evaluation battery used to judge them (flip ratio,
//! BKL, l1, correlation difference, diversity, attribute and embedding
//! metrics, Frechet embedding distance).
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`schedule`]: beta/alpha ladders, forward corruption, respacing
//! - [`ddpm`]: denoiser training and the unconditional reverse chain
//! - [`guidance`]: the guided explanation loop and its ablation variants
//! - [`nets`]: classifier / oracle / embedder contracts and training
//! - [`metrics`]: the evaluation battery
//! - [`synthdata`]: synthetic correlated-attribute datasets with exact
//!   ground-truth statistics, plus IDX ingestion
//! - [`checkpoint`]: versioned model container
pub mod checkpoint;
pub mod ddpm;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod rngstream;
pub mod schedule;
pub mod synthdata;

pub use error::{Error, Result};

/// Single image tensor, channels-first (C, H, W), values in [-1, 1].
pub type Image = ndarray::Array3<f64>;
