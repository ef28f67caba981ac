//! Pedestrian reachability from learned behavior clusters.
//!
//! The crate covers the whole offline/online pipeline:
//!
//! * [`data`] loads trajectory logs, filters stationary detections, chunks and
//!   pads them, and splits them into train/val/test sets.
//! * [`nn`] is a small reverse-mode tensor engine with Adam.
//! * [`encoder`] is the transformer trajectory encoder and its masked
//!   denoising training loop.
//! * [`cluster`] mean-pools embeddings and runs HDBSCAN and PCA.
//! * [`ann`] is a random-hyperplane forest used to assign unseen
//!   trajectories to clusters.
//! * [`reach`] holds zonotope algebra and data-driven reachability.
//! * [`eval`] compares data-selection methods on the test split.
//! * [`pipeline`] wires the stages together behind a flat [`config::RunConfig`].

pub mod ann;
pub mod cluster;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod reach;
pub mod rng;

pub use error::{Error, Result};
