//! Supervised and two-stage contrastive training.

pub mod config;
pub mod loss;
pub mod optim;
mod run;

pub use config::{Paradigm, TrainConfig};
pub use loss::{cross_entropy_batch, cross_entropy_loss, supcon_loss, supcon_loss_and_grad};
pub use optim::AdamW;
pub use run::{
    linear_probe, predict_split, pretrain_supcon, train_supcon, train_supervised, EpochRecord, TrainOutcome,
    TrainRunRecord, TrainingData,
};
