//! Run configuration: one JSON document plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{AblationVariant, Component};
use crate::filter::{GaussianSensorModel, InferenceConfig};
use crate::models::{ArchConfig, TrainConfig};
use crate::tasks::{LinearGaussianParams, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: line {line}, column {column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("override `{0}`: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_rollouts: usize,
    pub val_rollouts: usize,
    pub test_rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Observation availability for the test split; the task's own value when unset.
    pub test_obs_availability: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_rollouts: 200,
            val_rollouts: 40,
            test_rollouts: 16,
            horizon: 50,
            seed: 0,
            test_obs_availability: None,
        }
    }
}

/// External Gaussian sensor on raw states, fused at inference time only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Vec<f64>,
    /// Noise standard deviation per reading dimension.
    pub std: Vec<f64>,
    #[serde(default = "one")]
    pub availability: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SensorConfig {
    pub fn raw_model(&self) -> GaussianSensorModel {
        let offset = if self.offset.is_empty() {
            vec![0.0; self.h.len()]
        } else {
            self.offset.clone()
        };
        GaussianSensorModel {
            h: self.h.clone(),
            offset,
            r: self.std.iter().map(|s| s * s).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Kernel variance of the metric; `e⁻³` when unset.
    pub sigma2: Option<f64>,
    /// Extra per-component breakdowns.
    pub components: Vec<Component>,
    /// Store every particle in trajectory files (needed by `eval` and `plot`).
    pub save_particles: bool,
    pub variants: Vec<AblationVariant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sigma2: None,
            components: Vec::new(),
            save_particles: true,
            variants: AblationVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub particles: Vec<usize>,
    pub steps: Vec<usize>,
    pub warm_start: Vec<f64>,
    pub guidance: Vec<f64>,
    pub theta: Vec<f64>,
    /// Test sequences used per point.
    pub sequences: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            particles: vec![10, 100, 1000],
            steps: Vec::new(),
            warm_start: Vec::new(),
            guidance: Vec::new(),
            theta: Vec::new(),
            sequences: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub bundle: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "runs/data".into(),
            bundle: "runs/bundle".into(),
            out: "runs/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub sensor: Option<SensorConfig>,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::LinearGaussian(LinearGaussianParams::default()),
            data: DataConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            sensor: None,
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn parse_err(origin: &str, e: serde_json::Error) -> ConfigError {
    ConfigError::Parse {
        origin: origin.into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects on the way.
fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(path.into()));
    }
    for key in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(ConfigError::Invalid(format!("`{path}`: `{key}` is not a section")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        if cur.is_null() {
            *cur = serde_json::Value::Object(Default::default());
        }
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(ConfigError::Invalid(format!("`{path}` does not name a field"))),
    }
}

impl RunConfig {
    /// Parses `text` (JSON), applies `overrides` (`key.path=value`, value
    /// parsed as JSON or else taken as a string) and validates.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(origin, e))?;
        if !value.is_object() {
            return Err(ConfigError::Invalid(format!("{origin}: top level must be an object")));
        }
        // Parsed from the text so errors carry a line; defaults filled in
        // before overrides so they can reach into unset sections.
        let base: RunConfig = serde_json::from_str(text).map_err(|e| parse_err(origin, e))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut value = serde_json::to_value(&base).expect("config serializes");
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.into()));
            set_path(&mut value, k.trim(), parsed)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Invalid(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::parse(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse("{}", "defaults", overrides),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        let task = self.task.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.inference.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.data;
        if d.train_rollouts == 0 || d.val_rollouts == 0 || d.test_rollouts == 0 || d.horizon == 0 {
            return inv("data: rollout counts and horizon must be positive".into());
        }
        if let Some(p) = d.test_obs_availability {
            if !(0.0..=1.0).contains(&p) {
                return inv(format!("data.test_obs_availability {p} is not a probability"));
            }
        }
        if let Some(s) = &self.sensor {
            let m = s.h.len();
            if m == 0 || s.std.len() != m || (!s.offset.is_empty() && s.offset.len() != m) {
                return inv("sensor: h, std and offset must have one entry per reading dimension".into());
            }
            s.raw_model()
                .validate(task.state_dim())
                .map_err(|e| ConfigError::Invalid(format!("sensor: {e}")))?;
            if !(0.0..=1.0).contains(&s.availability) {
                return inv("sensor.availability must be a probability".into());
            }
        }
        if let Some(s2) = self.eval.sigma2 {
            if !(s2 > 0.0 && s2.is_finite()) {
                return inv("eval.sigma2 must be positive".into());
            }
        }
        for c in &self.eval.components {
            if c.dims.is_empty() || c.dims.iter().any(|&j| j >= task.state_dim()) {
                return inv(format!("eval component `{}` has invalid dimensions", c.name));
            }
        }
        if self.sweep.sequences == 0 || self.sweep.particles.contains(&0) || self.sweep.steps.contains(&0) {
            return inv("sweep: sequences, particles and steps must be positive".into());
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sigma2(&self) -> f64 {
        self.eval.sigma2.unwrap_or_else(crate::eval::default_sigma2)
    }
}
