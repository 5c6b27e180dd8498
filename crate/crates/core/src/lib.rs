//! Content-based retrieval engine for 3D volumes.
//!
//! Slices of a volume are embedded by a small VAE, classified against
//! per-slice cosine prototypes, grouped into 2.5D blocks for voting and
//! retrieval, and painted back into voxel probability maps.
//!
//! APIs use zero-based class, slice and block indices. Files and reports
//! meant for people use one-based labels.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod probmap;
pub mod protohead;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
