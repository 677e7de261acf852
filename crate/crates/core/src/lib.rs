//! Adaptive temperature selection for a small language model.
//!
//! A frozen decoder-only transformer is paired with a trainable head that
//! maps the final hidden state to a distribution over candidate sampling
//! temperatures. The head is trained with DPO-style preference losses over
//! latent temperature choices, from preference pairs built by scoring
//! sampled generations with programmatic reward oracles.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod lpo;
pub mod model;
pub mod optim;
pub mod pairs;
pub mod rewards;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
