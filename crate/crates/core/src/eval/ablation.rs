use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Component, EvalError, MetricReport, SequenceMetric};
use crate::filter::{filter_rollout, FilterInput, InferenceConfig, InferenceMode};
use crate::models::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Unrolled learned dynamics.
    DynamicsOnly,
    /// Dynamics predictions denoised with the unconditional prior.
    DynamicsPrior,
    /// Per-timestep sampling from the measurement model alone.
    LikelihoodOnly,
    NoConstraint,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::DynamicsOnly,
        AblationVariant::DynamicsPrior,
        AblationVariant::LikelihoodOnly,
        AblationVariant::NoConstraint,
        AblationVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::DynamicsOnly => "dynamics-only",
            AblationVariant::DynamicsPrior => "dynamics+prior",
            AblationVariant::LikelihoodOnly => "likelihood-only",
            AblationVariant::NoConstraint => "without-constraint",
            AblationVariant::Full => "full",
        }
    }

    pub fn configure(self, base: &InferenceConfig) -> InferenceConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::DynamicsOnly => c.mode = InferenceMode::DynamicsOnly,
            AblationVariant::DynamicsPrior => c.mode = InferenceMode::DynamicsPrior,
            AblationVariant::LikelihoodOnly => c.mode = InferenceMode::LikelihoodOnly,
            AblationVariant::NoConstraint => {
                c.mode = InferenceMode::Full;
                c.constraint.enabled = false;
            }
            AblationVariant::Full => {
                c.mode = InferenceMode::Full;
                c.constraint.enabled = true;
            }
        }
        c
    }
}

/// Seed for sequence `id`, shared by all variants.
pub fn sequence_seed(base: u64, id: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64)
}

/// Filters every sequence with every variant and scores it against the
/// normalized ground truth. Sequences run in parallel; results are ordered
/// by sequence id.
pub fn run_ablations<M: ScoreModel>(
    model: &M,
    inputs: &[FilterInput],
    ground_truth: &[Vec<Vec<f64>>],
    variants: &[AblationVariant],
    base: &InferenceConfig,
    components: &[Component],
    sigma2: f64,
) -> Result<Vec<MetricReport>, EvalError> {
    if inputs.len() != ground_truth.len() || inputs.is_empty() {
        return Err(EvalError::Invalid("need one ground-truth sequence per input".into()));
    }
    variants
        .iter()
        .map(|&v| {
            let cfg = v.configure(base);
            let seqs = inputs
                .par_iter()
                .zip(ground_truth)
                .enumerate()
                .map(|(id, (input, gt))| {
                    let c = InferenceConfig {
                        seed: sequence_seed(base.seed, id),
                        ..cfg.clone()
                    };
                    let traj = filter_rollout(model, input, &c, None, None)?;
                    SequenceMetric::evaluate(id, &traj, gt, components, sigma2)
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(MetricReport::new(v.label(), components.to_vec(), seqs))
        })
        .collect()
}
