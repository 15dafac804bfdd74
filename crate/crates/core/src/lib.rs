//! Prompt-driven feature-statistic style transfer for single-domain
//! generalized detection on a small grounded detector.

pub mod boxes;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod featstats;
pub mod groundnet;
pub mod prompts;
pub mod scalar;
pub mod styleengine;
pub mod trainer;

pub use error::{PgstError, Result};
pub use scalar::Scalar;

pub type FeatureMap32 = featstats::FeatureMap<f32>;
pub type FeatureMap64 = featstats::FeatureMap<f64>;
pub type ChannelStyle32 = featstats::ChannelStyle<f32>;
pub type ChannelStyle64 = featstats::ChannelStyle<f64>;
pub type GroundingModel32 = groundnet::GroundingModel<f32>;
pub type GroundingModel64 = groundnet::GroundingModel<f64>;
pub type StyleBank32 = styleengine::StyleBank<f32>;
pub type StyleBank64 = styleengine::StyleBank<f64>;
