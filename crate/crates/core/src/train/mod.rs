//! Two-stage training: landmark-branch pretraining, adversarial
//! separation/reconstruction training with alternating minimax updates,
//! learning-rate decay, per-epoch checkpoints, selection, and fine-tuning.

pub mod config;
pub mod log;
pub mod run;

pub use config::{
    lr_for_epoch, FinetuneConfig, Stage1Config, Stage2Config, TrainConfig, LR_GROUP_LEN,
    MAX_STAGE2_EPOCHS,
};
pub use log::{DiscScores, RunLog, StepRecord, ValRecord};
pub use run::{
    branch_validation_error, evaluate_au, pretrain_landmark_branch, select_and_finetune,
    tail_validation_error, train_main, AuEvaluation, EpochCheckpoint, PretrainOutcome,
    Stage2Stepper, TrainOutcome,
};
