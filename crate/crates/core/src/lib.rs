//! State-to-flow air traffic prediction.
//!
//! The crate covers the whole pipeline: a synthetic terminal-area traffic
//! generator emitting lossy ADS-B-like messages, snapshot construction over a
//! short look-back window, the 18-component situation-aware state vector, a
//! masked set-attention network with decoupled regional heads built on a small
//! reverse-mode autodiff tape, and the training/evaluation loop with metrics,
//! dayparting and two reference baselines.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod model;
pub mod simulator;
pub mod snapshot;
pub mod train;

pub use error::{Error, Result};
