//! Losses, the optimization loop and checkpoint persistence.

pub mod checkpoint;
pub mod loss;
pub mod trainer;

pub use checkpoint::{
    config_difference, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, write_atomic,
    Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use loss::{batch_loss, batch_loss_graph, focal_term, sequence_cross_entropy, sequence_focal_loss, LossConfig, PROB_FLOOR};
pub use trainer::{bucket_batches, fit, fit_with, greedy_cer, EpochStats, FitOutcome, StepStats, TrainConfig, Trainer};
