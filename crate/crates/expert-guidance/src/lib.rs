//! Expert-guided diffusion sampling on analytic Gaussian mixtures.
//!
//! The data distribution is a Gaussian mixture with closed-form density,
//! score and posterior mean, so the two generation backends are exact: an
//! iterative posterior-mean predictor and a probability-flow consistency
//! predictor. Differentiable analytic expert models (embedding similarity,
//! classification, regression, dense per-patch classification) steer the
//! deterministic sampler through warmup-gated, clipped gradient updates of
//! the predicted noise, and the evaluation harness measures task metrics,
//! distribution quality and trajectory behaviour.

pub mod benchmark;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experts;
pub mod guidance;
pub mod mixture;
pub mod plot;
pub mod report;
pub mod schedule;
pub mod selfcheck;

pub use error::{Error, Result};
