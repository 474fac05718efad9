//! Warm-up of the reference model and joint flashback adaptation.

mod adapt;
mod warmup;

pub use adapt::{
    adapt, end_micro_batch, epoch_order, jfa_step, optimizer_update, prepare_flashbacks, Accumulators, Counters,
    EpochMetrics, GradBuffer, InvariantChecks, Optimizer, ParamKey, PcgradGranularity, PcgradScope, RunConfig,
    RunOutcome, RunReport, StepContext, TrainItem,
};
pub use warmup::{warmup, warmup_with, WarmupConfig, WarmupEpoch, WarmupOutcome};

use crate::tasks::Example;
use crate::vocab::Token;

/// Teacher-forcing triple for a supervised example: model input, next-token
/// targets, and a mask selecting the answer and EOS predictions.
pub fn supervised_sequence(e: &Example) -> (Vec<Token>, Vec<Token>, Vec<bool>) {
    let full = e.full_sequence();
    let input = full[..full.len() - 1].to_vec();
    let targets = full[1..].to_vec();
    let mask = (0..input.len()).map(|t| t + 1 >= e.prompt.len()).collect();
    (input, targets, mask)
}
