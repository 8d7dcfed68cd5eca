//! Losses, optimizer, synthetic data and the training loops.

mod adam;
mod data;
mod loss;
mod trainer;

pub use adam::{Adam, OptimizerConfig};
pub use data::{crop_pair, mixture_snr_db, synth_dataset, AudioPair, Dataset, SNR_CHOICES_DB};
pub use loss::{loss_dcp, loss_dcp_on_tape, loss_se, loss_se_masked, loss_se_on_tape};
pub use trainer::{
    evaluate, finetune_dyncp, history_to_jsonl, train_baseline, utterance_gates, Batch, EpochRecord, Evaluation,
    LossConfig, Plateau, StepStats, TrainConfig, TrainOutcome, Trainer,
};
