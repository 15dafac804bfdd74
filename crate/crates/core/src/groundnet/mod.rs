//! Surrogate grounded detector.
//!
//! Image encoder: `L` stride-2 3×3 conv + ReLU levels. The optional style
//! hook re-styles the output of one or more levels before deeper levels
//! consume it. A 1×1 head on the top level predicts, for every anchor, a
//! `d`-dimensional region feature and four box deltas. Phrases are encoded
//! as the mean of their token embeddings followed by a linear map to `d`.
//! Region-phrase logits are `R · Wᵀ`.

mod checkpoint;
mod layers;
mod loss;
mod model;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{Conv2d, Dense};
pub use loss::{
    assign_targets, grounding_loss, grounding_loss_with_grad, grounding_targets, localization_loss,
    localization_loss_with_grad, AlignmentMatrix, BinaryMatrix, LossBreakdown,
};
pub use model::{
    ForwardInput, GradRequest, GroundTruth, GroundingModel, ImageTensor, ImageTrace, LayerStyle, ModelConfig,
    ModelGrads, ObjectiveOutput, ParamGroup, PhraseEmbedding, RegionSet, StyleGrad, POSITIVE_IOU,
};
