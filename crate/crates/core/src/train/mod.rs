//! Losses, optimisation and the two-phase training protocol.

pub mod loss;
pub mod optim;
pub mod run;

pub use loss::{ade_aux, nll, ttc_penalty, window_loss, LossBreakdown};
pub use optim::{plateau_trace, AdamW, Plateau};
pub use run::{run_finetune, run_pretrain, EpochLog, Phase, SampleSet, TrainConfig, TrainOutcome};
