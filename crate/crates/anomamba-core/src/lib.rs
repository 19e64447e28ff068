#![cfg_attr(not(feature = "std"), no_std)]
//! Core compute for a reconstruction-based anomaly detector built on
//! selective state-space scans over 2D feature maps.
//!
//! Everything here is deterministic: identical seeds and inputs give
//! bit-identical outputs. The crate is no_std-compatible (alloc required);
//! file formats, datasets and the CLI live in the companion `anomamba` crate.

extern crate alloc;

pub mod anomaly;
pub mod blocks;
pub mod error;
pub mod graph;
pub mod mathf;
pub mod metrics;
pub mod model;
pub(crate) mod ops;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, ScanDirection, Var};
pub use params::{ParamId, ParamStore, Scope};
pub use tensor::Tensor;

pub use ops::{bilinear_resize, ConvSpec};
