//! In-memory glue between tasks, training and filtering.

use crate::filter::FilterInput;
use crate::models::{train, ArchConfig, ModelBundle, ModelError, TrainConfig, TrainReport, TransitionBatch};
use crate::tasks::{NormStats, RolloutRecord};

/// Fresh bundle trained on `train_set`, validated on `val_set`.
pub fn fit_bundle(
    train_set: &[RolloutRecord],
    val_set: &[RolloutRecord],
    stats: &NormStats,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainReport), ModelError> {
    let mut bundle = ModelBundle::new(arch.clone(), stats.clone(), cfg.seed)?;
    let tr = TransitionBatch::from_rollouts(train_set, stats);
    let va = TransitionBatch::from_rollouts(val_set, stats);
    let report = train(&mut bundle, &tr, &va, cfg)?;
    Ok((bundle, report))
}

/// Ground-truth states in normalized units.
pub fn normalized_states(rec: &RolloutRecord, stats: &NormStats) -> Vec<Vec<f64>> {
    rec.x.iter().map(|x| stats.x.normalize(x)).collect()
}

/// Filter inputs and normalized ground truth for a set of rollouts.
pub fn evaluation_set(rollouts: &[RolloutRecord], stats: &NormStats) -> (Vec<FilterInput>, Vec<Vec<Vec<f64>>>) {
    rollouts
        .iter()
        .map(|r| (FilterInput::from_rollout(r, stats), normalized_states(r, stats)))
        .unzip()
}
