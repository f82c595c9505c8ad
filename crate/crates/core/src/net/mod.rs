//! The frozen task model, its training loop, and the CycleGAN loss terms.

mod layers;
mod losses;
mod model;
mod train;

pub use layers::{param_checksum, Conv, ConvVars, LEAKY_SLOPE};
pub use losses::{
    adversarial_loss, cycle_consistency_loss, cyclegan_total_loss, identity_loss, PROB_CLAMP,
};
pub use model::{FeatureTrace, LayerKind, LayerSpec, TaskConfig, TaskModel};
pub use train::{train_params, train_task, TrainReport};
