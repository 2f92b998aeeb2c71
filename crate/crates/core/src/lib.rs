//! Facial landmark regression with a tweaked CNN.
//!
//! A small convolutional network (the vanilla model) regresses five
//! landmarks from a 40×40 face crop. Features entering its first dense
//! layer are clustered with a diagonal Gaussian mixture, and for each
//! cluster a copy of the dense head is fine-tuned on that cluster's samples
//! while the convolutional trunk stays frozen. At inference a sample is
//! routed to the head of its most probable cluster.
//!
//! Numerical code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices. The pipeline and CLI work in `f64`.
//!
//! Stages, in order: [`pipeline::stage_train`], [`pipeline::stage_cluster`],
//! [`pipeline::stage_analyze`], [`pipeline::stage_tweak`],
//! [`pipeline::stage_eval`], [`pipeline::stage_sweepk`], then
//! [`report::emit_report`].

pub mod adam;
pub mod analysis;
pub mod augment;
pub mod container;
pub mod dataio;
pub mod error;
pub mod gmm;
pub mod landmarks;
pub mod layers;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tweak;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type LandmarkSet64 = landmarks::LandmarkSet<f64>;
pub type Sample64 = dataio::Sample<f64>;
pub type Dataset64 = dataio::Dataset<f64>;
pub type Network64 = network::Network<f64>;
pub type Network32 = network::Network<f32>;
pub type NetworkModel64 = model::NetworkModel<f64>;
pub type NetworkModel32 = model::NetworkModel<f32>;
pub type GmmModel64 = gmm::GmmModel<f64>;
pub type TweakedModel64 = tweak::TweakedModel<f64>;
pub type TweakedModel32 = tweak::TweakedModel<f32>;
