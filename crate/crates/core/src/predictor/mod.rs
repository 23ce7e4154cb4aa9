//! Retrieval-augmented regression from spot features to expression.
//!
//! Training alternates per epoch between the contrastive phase (both
//! projection heads), a memory-bank rebuild, and the regression phase, where
//! each pool spot's leave-one-out retrieval supplies a soft label for the
//! confidence-gated distillation term.

mod checkpoint;
mod layers;
mod losses;
mod retrieval;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, train_config_hash, Manifest, TensorEntry, MANIFEST};
pub use layers::{dropout, Linear, LinearGrad, Mlp2, Mlp2Cache, Mlp2Grad, SgdStep};
pub use losses::{
    confidence_mask, distill_loss, infonce_loss, pcc_loss, pearson_with_grad, total_loss, LossBreakdown, LossWeights,
};
pub use retrieval::{
    majority_type_filter, rank_descending, retrieve, retrieve_soft_label, soft_label, MemoryBank, Retrieved,
};
pub use train::{
    continue_training, regression_loss_and_grad, train, EpochLog, PredictorModel, TrainConfig,
};
