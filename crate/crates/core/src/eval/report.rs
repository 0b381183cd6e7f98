use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{gmm_nll_dims, iqm, iqr, sequence_metric, EvalError};
use crate::filter::Trajectory;

/// Named subset of state dimensions reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub dims: Vec<usize>,
}

impl Component {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        Component {
            name: name.into(),
            dims: dims.to_vec(),
        }
    }

    pub fn all(dim: usize) -> Self {
        Component::new("all", &(0..dim).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetric {
    pub id: usize,
    /// Per-dimension metric over all state dimensions.
    pub m: f64,
    /// Same metric restricted to each component, in report order.
    pub components: Vec<f64>,
    pub mean_step_seconds: f64,
}

impl SequenceMetric {
    /// Scores a trajectory against normalized ground truth `x_gt[t]`.
    pub fn evaluate(id: usize, traj: &Trajectory, x_gt: &[Vec<f64>], components: &[Component], sigma2: f64) -> Result<Self, EvalError> {
        if traj.steps.len() != x_gt.len() {
            return Err(EvalError::Invalid(format!(
                "trajectory has {} steps, ground truth {}",
                traj.steps.len(),
                x_gt.len()
            )));
        }
        let dim = traj.dim();
        let all: Vec<usize> = (0..dim).collect();
        let score = |dims: &[usize]| {
            let per_step: Vec<f64> = traj
                .steps
                .iter()
                .zip(x_gt)
                .map(|(s, gt)| gmm_nll_dims(&s.particles.states, Some(&s.particles.weights), dim, dims, gt, sigma2))
                .collect();
            sequence_metric(&per_step, dims.len())
        };
        let wall: f64 = traj.steps.iter().map(|s| s.wall_seconds).sum();
        Ok(SequenceMetric {
            id,
            m: score(&all),
            components: components.iter().map(|c| score(&c.dims)).collect(),
            mean_step_seconds: wall / traj.steps.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub iqm: f64,
    pub iqr: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        Summary {
            n: values.len(),
            iqm: iqm(values),
            iqr: iqr(values),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean_step_seconds: f64,
    pub max_step_seconds: f64,
}

/// Metric table for one filter variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub components: Vec<Component>,
    /// Sorted by sequence id.
    pub sequences: Vec<SequenceMetric>,
    pub summary: Summary,
    pub component_summary: Vec<Summary>,
    pub runtime: RuntimeStats,
}

impl MetricReport {
    pub fn new(label: &str, components: Vec<Component>, mut sequences: Vec<SequenceMetric>) -> Self {
        sequences.sort_by_key(|s| s.id);
        let ms: Vec<f64> = sequences.iter().map(|s| s.m).collect();
        let component_summary = (0..components.len())
            .map(|k| Summary::of(&sequences.iter().map(|s| s.components[k]).collect::<Vec<_>>()))
            .collect();
        let steps: Vec<f64> = sequences.iter().map(|s| s.mean_step_seconds).collect();
        MetricReport {
            label: label.into(),
            summary: Summary::of(&ms),
            component_summary,
            runtime: RuntimeStats {
                mean_step_seconds: Summary::of(&steps).mean,
                max_step_seconds: steps.iter().copied().fold(0.0, f64::max),
            },
            components,
            sequences,
        }
    }

    pub fn m_iqm(&self) -> f64 {
        self.summary.iqm
    }

    /// One row per sequence. Runtime is left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,m");
        for c in &self.components {
            let _ = write!(s, ",m_{}", c.name);
        }
        s.push('\n');
        for q in &self.sequences {
            let _ = write!(s, "{},{}", q.id, q.m);
            for v in &q.components {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Summary without per-sequence rows or runtime.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "sequences": self.sequences.len(),
            "m": self.summary,
            "components": self.components.iter().zip(&self.component_summary)
                .map(|(c, s)| serde_json::json!({"name": c.name, "dims": c.dims, "m": s}))
                .collect::<Vec<_>>(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} M_IQM {:>9.4}  IQR {:>8.4}  (n = {})",
            self.label, self.summary.iqm, self.summary.iqr, self.summary.n
        );
        for (c, cs) in self.components.iter().zip(&self.component_summary) {
            let _ = write!(s, "  {}: {:.4}", c.name, cs.iqm);
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("serializable");
        std::fs::write(&json, text + "\n").map_err(io(&json))?;
        Ok(())
    }
}
