//! Contrastive pixel-to-point pretraining for point-cloud encoders, end to
//! end on synthetic RGB-D scenes: a frozen 2D teacher supplies per-pixel
//! targets, a 3D student learns matching per-point embeddings through an
//! InfoNCE-style objective over back-projected pixel-point pairs, and
//! retrieval / linear-probe evaluations measure the transfer.
//!
//! All math is generic over the [`Real`] scalar (`f32` or `f64`); the
//! crate-root aliases fix the production scalar to `f64`.

pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod ops;
pub mod params;
pub mod real;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;

/// Production scalar type.
pub type Scalar = f64;

pub type DenseArray = tensor::DenseArray<Scalar>;
pub type ParamStore = params::ParamStore<Scalar>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<Scalar>;
pub type PointCloud = geometry::PointCloud<Scalar>;
pub type SceneSpec = synthdata::SceneSpec<Scalar>;
pub type RgbdFrame = synthdata::RgbdFrame<Scalar>;
pub type Dataset = synthdata::Dataset<Scalar>;
pub type ModelConfig = models::ModelConfig<Scalar>;
pub type TrainConfig = trainer::TrainConfig<Scalar>;
pub type LossOutput = losses::LossOutput<Scalar>;
