//! Tied-weight Top-K sparse autoencoder.

mod loss;
mod model;
mod train;

pub use loss::{residual_loss, sae_loss, DeadMask, LossAndGrad, ReconstructionNorm};
pub use model::{SparseActivation, TopKSae, SAE_MAGIC, SAE_VERSION};
pub use train::{
    dataset_loss, detect_dead_features, finetune, nmse, pretrain, EpochRecord, SaeTrainConfig,
};
