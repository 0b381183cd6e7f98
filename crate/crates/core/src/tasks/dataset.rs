use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DimStats, NormStats, Task, TaskError, TaskSpec};
use crate::write_json_line;

pub const ROLLOUT_FORMAT: &str = "dnpf-rollout";
pub const MANIFEST_FORMAT: &str = "dnpf-dataset";
const VERSION: u32 = 1;

const STREAM_PRIOR: u64 = 0;
const STREAM_POLICY: u64 = 1;
const STREAM_PROCESS: u64 = 2;
const STREAM_MEAS: u64 = 3;
const STREAM_MASK: u64 = 4;

/// One trajectory in raw units. All arrays have `T + 1` entries; index 0
/// holds the initial state, its observation and the resting control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task: String,
    pub seed: u64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub obs: Vec<bool>,
}

impl RolloutRecord {
    pub fn horizon(&self) -> usize {
        self.x.len().saturating_sub(1)
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.x.len();
        n >= 2 && self.y.len() == n && self.u.len() == n && self.obs.len() == n
    }

    /// Most recent available observation strictly before `t`, else `y_t` itself.
    pub fn previous_obs(&self, t: usize) -> &[f64] {
        (0..t)
            .rev()
            .find(|&k| self.obs[k])
            .map(|k| self.y[k].as_slice())
            .unwrap_or(self.y[t].as_slice())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Simulate `T` steps from the prior. Each noise source has its own stream.
pub fn simulate_rollout(task: &dyn Task, seed: u64, horizon: usize) -> RolloutRecord {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut prior = stream(seed, STREAM_PRIOR);
    let mut policy = stream(seed, STREAM_POLICY);
    let mut process = stream(seed, STREAM_PROCESS);
    let mut meas = stream(seed, STREAM_MEAS);
    let mut mask = stream(seed, STREAM_MASK);

    let x0 = task.sample_prior(&mut prior);
    let u0 = task.initial_control(&x0);
    let y0 = task.observe(&x0, &u0, &mut meas);
    let mut rec = RolloutRecord {
        task: task.name().to_string(),
        seed,
        x: vec![x0],
        y: vec![y0],
        u: vec![u0],
        obs: vec![true],
    };
    let p = task.obs_availability();
    for t in 1..=horizon {
        let u = task.sample_control(t, &rec.x[t - 1], &rec.u[t - 1], &mut policy);
        let x = task.step(&rec.x[t - 1], &u, &mut process);
        let y = task.observe(&x, &u, &mut meas);
        let available = mask.random::<f64>() < p;
        rec.x.push(x);
        rec.y.push(y);
        rec.u.push(u);
        rec.obs.push(available);
    }
    rec
}

#[derive(Serialize, Deserialize)]
struct RolloutHeader {
    format: String,
    version: u32,
    task: String,
    seed: u64,
    horizon: usize,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    t: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    u: Vec<f64>,
    obs: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> TaskError {
    TaskError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_rollout(path: &Path, rec: &RolloutRecord) -> Result<(), TaskError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let header = RolloutHeader {
        format: ROLLOUT_FORMAT.into(),
        version: VERSION,
        task: rec.task.clone(),
        seed: rec.seed,
        horizon: rec.horizon(),
    };
    write_json_line(&mut w, &header).map_err(io_err(path))?;
    for t in 0..rec.x.len() {
        let step = StepLine {
            t,
            x: rec.x[t].clone(),
            y: rec.y[t].clone(),
            u: rec.u[t].clone(),
            obs: rec.obs[t],
        };
        write_json_line(&mut w, &step).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rollout(path: &Path) -> Result<RolloutRecord, TaskError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| fmt_err(path, "empty rollout file"))?
        .map_err(io_err(path))?;
    let header: RolloutHeader =
        serde_json::from_str(&first).map_err(|e| fmt_err(path, format!("line 1: {e}")))?;
    if header.format != ROLLOUT_FORMAT || header.version != VERSION {
        return Err(fmt_err(
            path,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut rec = RolloutRecord {
        task: header.task,
        seed: header.seed,
        x: Vec::new(),
        y: Vec::new(),
        u: Vec::new(),
        obs: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepLine =
            serde_json::from_str(&line).map_err(|e| fmt_err(path, format!("line {}: {e}", i + 2)))?;
        if step.t != rec.x.len() {
            return Err(fmt_err(path, format!("line {}: expected t = {}", i + 2, rec.x.len())));
        }
        rec.x.push(step.x);
        rec.y.push(step.y);
        rec.u.push(step.u);
        rec.obs.push(step.obs);
    }
    if !rec.is_consistent() || rec.horizon() != header.horizon {
        return Err(fmt_err(path, "record count does not match header horizon"));
    }
    Ok(rec)
}

/// Snapshot of a generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub task: TaskSpec,
    pub rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    pub child_seeds: Vec<u64>,
    pub files: Vec<String>,
    pub stats: NormStats,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rollouts: Vec<RolloutRecord>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `i`-th rollout. Distinct for distinct `i` since splitmix is a bijection.
pub(crate) fn child_seed(seed: u64, i: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (i as u64))
}

/// Normalization statistics: `x` over all steps, `y` over available
/// observations, `u` over the applied controls (`t ≥ 1`).
pub fn compute_stats(task: &dyn Task, rollouts: &[RolloutRecord]) -> NormStats {
    let x = DimStats::from_samples(task.state_dim(), rollouts.iter().flat_map(|r| r.x.iter().map(|v| v.as_slice())));
    let y = DimStats::from_samples(
        task.obs_dim(),
        rollouts
            .iter()
            .flat_map(|r| r.y.iter().zip(&r.obs).filter(|(_, o)| **o).map(|(v, _)| v.as_slice())),
    );
    let u = DimStats::from_samples(task.ctrl_dim(), rollouts.iter().flat_map(|r| r.u[1..].iter().map(|v| v.as_slice())));
    NormStats { x, y, u }
}

/// `n` rollouts in memory, seeded as [`generate_dataset`] would seed them.
pub fn simulate_rollouts(task: &dyn Task, n: usize, horizon: usize, seed: u64) -> Vec<RolloutRecord> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate_rollout(task, child_seed(seed, i), horizon))
        .collect()
}

/// Simulate `n` rollouts into `dir` and write `manifest.json` next to them.
pub fn generate_dataset(
    spec: &TaskSpec,
    n: usize,
    horizon: usize,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest, TaskError> {
    if n == 0 || horizon == 0 {
        return Err(TaskError::Invalid("dataset needs at least one rollout of one step".into()));
    }
    let task = spec.build()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let child_seeds: Vec<u64> = (0..n).map(|i| child_seed(seed, i)).collect();
    let files: Vec<String> = (0..n).map(|i| format!("rollout_{i:05}.jsonl")).collect();
    let rollouts: Vec<RolloutRecord> = child_seeds
        .par_iter()
        .zip(files.par_iter())
        .map(|(&s, name)| {
            let rec = simulate_rollout(task.as_ref(), s, horizon);
            write_rollout(&dir.join(name), &rec)?;
            Ok(rec)
        })
        .collect::<Result<_, TaskError>>()?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: VERSION,
        task: spec.clone(),
        rollouts: n,
        horizon,
        seed,
        child_seeds,
        files,
        stats: compute_stats(task.as_ref(), &rollouts),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, TaskError> {
    let path: PathBuf = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| fmt_err(&path, e.to_string()))?;
    if m.format != MANIFEST_FORMAT || m.version != VERSION {
        return Err(fmt_err(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    if !m.stats.is_valid() {
        return Err(fmt_err(&path, "normalization statistics must be finite with positive spread"));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TaskError> {
    let manifest = read_manifest(dir)?;
    let rollouts = manifest
        .files
        .par_iter()
        .map(|f| read_rollout(&dir.join(f)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, rollouts })
}
