//! The reference embedding network, its optimizer, the composite objective
//! and the training loops.

pub mod adam;
pub mod gradcheck;
pub mod network;
pub mod objective;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, LossSelector};
pub use network::{backward, forward, ConvNetParams};
pub use objective::{total_loss, LossReport, LossWeights, TrainerConfig};
pub use train::{
    distill_student, evaluate_model, predict, train_plain_student, train_supervised, train_teacher,
    TrainOutcome,
};
