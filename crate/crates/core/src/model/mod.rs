//! The appearance, gait and fusion networks.

pub mod appearance;
pub mod fusion;
pub mod gait;

pub use appearance::{AppearanceFeatures, AppearanceNet, Backbone, BackboneConfig, Bottleneck, EMBED_DIM};
pub use fusion::{
    BranchFlags, FeatureBundle, Ffm, Logits, ModelConfig, ModelOutput, SeqMasksModel, Variant, GROUPS,
};
pub use gait::{GaitFeatures, GaitNet, HEAD_DIM};
