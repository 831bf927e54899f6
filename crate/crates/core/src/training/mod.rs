//! Dual-domain loss, optimizer, training loop and checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod loss;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainedModel};
pub use fit::{
    compute_training_stats, fit, make_samples, train_baseline, train_hybrid, EpochLog, FitReport, MaskMode,
    MaskPlan, Trainable, TrainConfig, TrainSample,
};
pub use loss::{dual_domain_loss, dual_domain_loss_with_grad, nrmse_with_grad, LossTerms};
