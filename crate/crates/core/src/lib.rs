//! Object-level visual prompt composition for a small pixel-space diffusion
//! model: procedural scenes, frozen prompt encoders, KV-mixed decoupled
//! cross-attention, adapter training, compositional guidance and
//! evaluation.

pub mod adapters;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image;
pub mod metric;
pub mod model;
pub mod params;
pub mod seeds;
pub mod sprite_world;
pub mod trainer;

pub use error::{Error, Result};
pub use kvmix_tensor::Tensor;
