//! Single-shot object detector with reverse-connection feature fusion and an
//! objectness prior, built on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod ablation;
pub mod anchors;
pub mod assigner;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
pub type BBox32 = anchors::BBox<f32>;
pub type BBox64 = anchors::BBox<f64>;
pub type AnchorSet32 = anchors::AnchorSet<f32>;
pub type AnchorSet64 = anchors::AnchorSet<f64>;
