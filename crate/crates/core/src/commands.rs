//! The operator commands behind the `dnpf` binary.
//!
//! Every command writes into a staging directory that replaces its output
//! directory only on success, together with a `provenance.json` record.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::diffusion::DiffusionError;
use crate::eval::{run_ablations, sequence_seed, Component, EvalError, MetricReport, SequenceMetric};
use crate::filter::{
    filter_rollout, read_trajectory, write_timing, write_trajectory, FilterError, FilterInput, GaussianSensorModel,
    InferenceConfig, ParticleSet, StepRecord, Trajectory,
};
use crate::models::{load_bundle, save_bundle, ModelBundle, ModelError};
use crate::nn::NnError;
use crate::pipeline::{evaluation_set, fit_bundle, normalized_states};
use crate::plot::{band_csv, band_rows, band_svg, bar_svg};
use crate::tasks::{generate_dataset, load_dataset, Dataset, RolloutRecord, TaskError};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CommandError {
    /// Process exit status: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Numeric(_) => 3,
            CommandError::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => CommandError::Io(e.to_string()),
            _ => CommandError::Config(e.to_string()),
        }
    }
}

impl From<TaskError> for CommandError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Invalid(_) => CommandError::Config(e.to_string()),
            _ => CommandError::Io(e.to_string()),
        }
    }
}

fn diffusion_kind(e: &DiffusionError) -> bool {
    matches!(e, DiffusionError::NonFinite { .. } | DiffusionError::NonPositiveCovariance { .. })
}

impl From<ModelError> for CommandError {
    fn from(e: ModelError) -> Self {
        let numeric = match &e {
            ModelError::Nn(NnError::NonFinite { .. } | NnError::NonFiniteGradient { .. }) | ModelError::Diverged { .. } => {
                true
            }
            ModelError::Diffusion(d) => diffusion_kind(d),
            ModelError::Io { .. } | ModelError::Format { .. } | ModelError::Nn(NnError::Io(_)) => {
                return CommandError::Io(e.to_string())
            }
            _ => false,
        };
        if numeric {
            CommandError::Numeric(e.to_string())
        } else {
            CommandError::Config(e.to_string())
        }
    }
}

impl From<FilterError> for CommandError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Model(m) => m.into(),
            FilterError::Diffusion(d) if diffusion_kind(&d) => CommandError::Numeric(d.to_string()),
            FilterError::Io { .. } | FilterError::Format { .. } => CommandError::Io(e.to_string()),
            _ => CommandError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CommandError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Task(t) => t.into(),
            EvalError::Filter(f) => f.into(),
            EvalError::Io { .. } => CommandError::Io(e.to_string()),
            EvalError::Invalid(_) => CommandError::Config(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |e| CommandError::Io(format!("{}: {e}", path.display()))
}

/// Output directory built next to its target and swapped in on commit.
/// Dropped without commit, it removes itself.
struct Staged {
    tmp: PathBuf,
    target: PathBuf,
    done: bool,
}

impl Staged {
    fn new(target: &Path) -> Result<Self, CommandError> {
        let name = target
            .file_name()
            .ok_or_else(|| CommandError::Config(format!("output path {} has no final component", target.display())))?;
        let tmp = target.with_file_name(format!("{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        std::fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        Ok(Staged {
            tmp,
            target: target.to_path_buf(),
            done: false,
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(mut self) -> Result<PathBuf, CommandError> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).map_err(io(&self.target))?;
        }
        std::fs::rename(&self.tmp, &self.target).map_err(io(&self.target))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    code_version: &'a str,
    config_hash: String,
    seeds: serde_json::Value,
    inputs: Vec<String>,
    config: &'a RunConfig,
}

fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<(), CommandError> {
    let p = Provenance {
        command,
        code_version: CODE_VERSION,
        config_hash: cfg.hash(),
        seeds: serde_json::json!({
            "data": cfg.data.seed,
            "train": cfg.train.seed,
            "inference": cfg.inference.seed,
            "sensor": cfg.sensor.as_ref().map(|s| s.seed),
        }),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config: cfg,
    };
    write_json(&dir.join("provenance.json"), &p)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CommandError> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CommandError> {
    std::fs::write(path, text).map_err(io(path))
}

fn split_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generates the train, validation and test splits.
pub fn simulate(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let stage = Staged::new(&cfg.paths.data)?;
    let d = &cfg.data;
    generate_dataset(&cfg.task, d.train_rollouts, d.horizon, split_seed(d.seed, 0), &stage.path().join("train"))?;
    generate_dataset(&cfg.task, d.val_rollouts, d.horizon, split_seed(d.seed, 1), &stage.path().join("val"))?;
    let mut test_task = cfg.task.clone();
    if let Some(p) = d.test_obs_availability {
        test_task.set_obs_availability(p);
    }
    generate_dataset(&test_task, d.test_rollouts, d.horizon, split_seed(d.seed, 2), &stage.path().join("test"))?;
    write_provenance(stage.path(), "simulate", cfg, &[])?;
    stage.commit()
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset, CommandError> {
    let ds = load_dataset(&cfg.paths.data.join(split))?;
    if ds.manifest.task.name() != cfg.task.name() {
        return Err(CommandError::Config(format!(
            "dataset task {} does not match configured task {}",
            ds.manifest.task.name(),
            cfg.task.name()
        )));
    }
    Ok(ds)
}

/// Trains a bundle on the train split with early stopping on the validation split.
pub fn train(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let tr = load_split(cfg, "train")?;
    let va = load_split(cfg, "val")?;
    let stats = tr.manifest.stats.clone();
    let (bundle, report) = fit_bundle(&tr.rollouts, &va.rollouts, &stats, &cfg.model, &cfg.train)?;
    let stage = Staged::new(&cfg.paths.bundle)?;
    save_bundle(&bundle, stage.path())?;
    write_json(&stage.path().join("train_report.json"), &report)?;
    write_provenance(stage.path(), "train", cfg, &[&cfg.paths.data])?;
    stage.commit()
}

fn load_model(cfg: &RunConfig) -> Result<ModelBundle, CommandError> {
    let bundle = load_bundle(&cfg.paths.bundle)?;
    let task = cfg.task.build()?;
    if bundle.dx != task.state_dim() || bundle.dy != task.obs_dim() || bundle.du != task.ctrl_dim() {
        return Err(CommandError::Config("bundle dimensions do not match the configured task".into()));
    }
    Ok(bundle)
}

/// Sensor readings for test sequence `id`, in raw units.
pub fn sensor_readings(cfg: &RunConfig, rec: &RolloutRecord, id: usize) -> Option<Vec<Option<Vec<f64>>>> {
    let s = cfg.sensor.as_ref()?;
    let raw = s.raw_model();
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(s.seed, id));
    Some(
        rec.x
            .iter()
            .map(|x| {
                let keep = rng.random::<f64>() < s.availability;
                let reading = raw.sample(x, &mut rng);
                keep.then_some(reading)
            })
            .collect(),
    )
}

fn normalized_sensor(cfg: &RunConfig, bundle: &ModelBundle) -> Option<GaussianSensorModel> {
    let s = cfg.sensor.as_ref()?.raw_model();
    Some(GaussianSensorModel::from_raw(s.h, s.offset, s.r, &bundle.stats.x))
}

fn run_filter(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    rollouts: &[RolloutRecord],
    inference: &InferenceConfig,
) -> Result<Vec<Trajectory>, CommandError> {
    let model = bundle.model(true);
    let sensor = normalized_sensor(cfg, bundle);
    rollouts
        .par_iter()
        .enumerate()
        .map(|(id, rec)| {
            let mut input = FilterInput::from_rollout(rec, &bundle.stats);
            input.sensor = sensor_readings(cfg, rec, id);
            let c = InferenceConfig {
                seed: sequence_seed(inference.seed, id),
                ..inference.clone()
            };
            Ok(filter_rollout(&model, &input, &c, None, sensor.as_ref())?)
        })
        .collect()
}

fn seq_name(id: usize) -> String {
    format!("seq_{id:05}")
}

/// Filters every test sequence. Trajectories go to `<out>/filter`, wall
/// times to `<out>/filter/timing`.
pub fn filter(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let bundle = load_model(cfg)?;
    let test = load_split(cfg, "test")?;
    let trajs = run_filter(cfg, &bundle, &test.rollouts, &cfg.inference)?;
    let stage = Staged::new(&cfg.paths.out.join("filter"))?;
    let timing = stage.path().join("timing");
    std::fs::create_dir_all(&timing).map_err(io(&timing))?;
    for (id, t) in trajs.iter().enumerate() {
        write_trajectory(
            &stage.path().join(format!("{}.jsonl", seq_name(id))),
            t,
            &bundle.stats.x,
            cfg.eval.save_particles,
        )?;
        write_timing(&timing.join(format!("{}.csv", seq_name(id))), t)?;
    }
    write_provenance(stage.path(), "filter", cfg, &[&cfg.paths.bundle, &cfg.paths.data])?;
    stage.commit()
}

fn components(cfg: &RunConfig, dim: usize) -> Vec<Component> {
    let mut c = vec![Component::all(dim)];
    c.extend(cfg.eval.components.iter().cloned());
    c
}

/// Scores the trajectories in `<out>/filter` against the test split.
pub fn eval(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let test = load_split(cfg, "test")?;
    let stats = test.manifest.stats.clone();
    let bundle_stats = load_bundle(&cfg.paths.bundle).map(|b| b.stats).unwrap_or(stats);
    let dir = cfg.paths.out.join("filter");
    let comps = components(cfg, bundle_stats.x.dim());
    let seqs = test
        .rollouts
        .iter()
        .enumerate()
        .map(|(id, rec)| {
            let file = read_trajectory(&dir.join(format!("{}.jsonl", seq_name(id))))?;
            let mut steps = Vec::with_capacity(file.steps.len());
            for line in &file.steps {
                let parts = line.particles.as_ref().ok_or_else(|| {
                    CommandError::Config("trajectories were written without particles (eval.save_particles)".into())
                })?;
                let states: Vec<f64> = parts.iter().flat_map(|p| bundle_stats.x.normalize(p)).collect();
                steps.push(StepRecord {
                    particles: ParticleSet::from_states(file.header.dim, states, line.t),
                    diag: line.diag.clone(),
                    wall_seconds: 0.0,
                });
            }
            let gt = normalized_states(rec, &bundle_stats);
            Ok(SequenceMetric::evaluate(id, &Trajectory { steps }, &gt, &comps, cfg.sigma2())?)
        })
        .collect::<Result<Vec<_>, CommandError>>()?;
    let report = MetricReport::new("dnpf", comps, seqs);
    let stage = Staged::new(&cfg.paths.out.join("eval"))?;
    report.write(stage.path(), "metrics")?;
    write_text(&stage.path().join("metrics.txt"), &(report.to_text() + "\n"))?;
    write_provenance(stage.path(), "eval", cfg, &[&dir, &cfg.paths.data])?;
    stage.commit()
}

fn ablation_table(reports: &[MetricReport]) -> String {
    let mut s = String::from("variant,m_iqm,m_iqr,m_mean");
    if let Some(r) = reports.first() {
        for c in &r.components {
            s.push_str(&format!(",m_iqm_{}", c.name));
        }
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{},{},{},{}", r.label, r.summary.iqm, r.summary.iqr, r.summary.mean));
        for c in &r.component_summary {
            s.push_str(&format!(",{}", c.iqm));
        }
        s.push('\n');
    }
    s
}

/// Runs the configured ablation variants on the test split.
pub fn ablate(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let bundle = load_model(cfg)?;
    let test = load_split(cfg, "test")?;
    let (inputs, gts) = evaluation_set(&test.rollouts, &bundle.stats);
    let comps = components(cfg, bundle.dx);
    let reports = run_ablations(
        &bundle.model(true),
        &inputs,
        &gts,
        &cfg.eval.variants,
        &cfg.inference,
        &comps,
        cfg.sigma2(),
    )?;
    let stage = Staged::new(&cfg.paths.out.join("ablate"))?;
    for r in &reports {
        r.write(stage.path(), &format!("variant_{}", r.label.replace('+', "_")))?;
    }
    write_text(&stage.path().join("ablation.csv"), &ablation_table(&reports))?;
    let text: Vec<String> = reports.iter().map(|r| r.to_text()).collect();
    write_text(&stage.path().join("ablation.txt"), &(text.join("\n") + "\n"))?;
    write_provenance(stage.path(), "ablate", cfg, &[&cfg.paths.bundle, &cfg.paths.data])?;
    stage.commit()
}

/// One evaluated point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub particles: usize,
    pub steps: usize,
    pub warm_start: f64,
    pub guidance: f64,
    pub theta: f64,
    pub m_iqm: f64,
    pub m_iqr: f64,
    /// Mean wall time per filtering step.
    pub step_seconds: f64,
}

fn or_base<T: Clone>(v: &[T], base: T) -> Vec<T> {
    if v.is_empty() {
        vec![base]
    } else {
        v.to_vec()
    }
}

/// Full grid over the configured sweep axes; unset axes keep the base value.
pub fn sweep_points(cfg: &RunConfig) -> Vec<InferenceConfig> {
    let b = &cfg.inference;
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &n in &or_base(&s.particles, b.particles) {
        for &k in &or_base(&s.steps, b.steps) {
            for &w in &or_base(&s.warm_start, b.warm_start) {
                for &g in &or_base(&s.guidance, b.guidance) {
                    for &th in &or_base(&s.theta, b.constraint.theta) {
                        let mut c = b.clone();
                        c.particles = n;
                        c.steps = k;
                        c.warm_start = w;
                        c.guidance = g;
                        c.constraint.theta = th;
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// Runtime and metric over the sweep grid on the first test sequences.
/// Metrics go to `sweep.csv`; wall times to `timing.csv`.
pub fn sweep(cfg: &RunConfig) -> Result<(PathBuf, Vec<SweepPoint>), CommandError> {
    let bundle = load_model(cfg)?;
    let test = load_split(cfg, "test")?;
    let n = cfg.sweep.sequences.min(test.rollouts.len());
    let rollouts = &test.rollouts[..n];
    let comps = components(cfg, bundle.dx);
    let mut points = Vec::new();
    for c in sweep_points(cfg) {
        c.validate()?;
        let trajs = run_filter(cfg, &bundle, rollouts, &c)?;
        let seqs = trajs
            .iter()
            .zip(rollouts)
            .enumerate()
            .map(|(id, (t, rec))| {
                SequenceMetric::evaluate(id, t, &normalized_states(rec, &bundle.stats), &comps, cfg.sigma2())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = MetricReport::new("sweep", comps.clone(), seqs);
        let steps: usize = trajs.iter().map(|t| t.steps.len() - 1).sum();
        let wall: f64 = trajs.iter().flat_map(|t| t.steps[1..].iter().map(|s| s.wall_seconds)).sum();
        points.push(SweepPoint {
            particles: c.particles,
            steps: c.steps,
            warm_start: c.warm_start,
            guidance: c.guidance,
            theta: c.constraint.theta,
            m_iqm: report.summary.iqm,
            m_iqr: report.summary.iqr,
            step_seconds: wall / steps.max(1) as f64,
        });
    }
    let stage = Staged::new(&cfg.paths.out.join("sweep"))?;
    let mut metrics = String::from("particles,steps,warm_start,guidance,theta,m_iqm,m_iqr\n");
    let mut timing = String::from("particles,steps,warm_start,guidance,theta,step_seconds\n");
    for p in &points {
        let key = format!("{},{},{},{},{}", p.particles, p.steps, p.warm_start, p.guidance, p.theta);
        metrics.push_str(&format!("{key},{},{}\n", p.m_iqm, p.m_iqr));
        timing.push_str(&format!("{key},{}\n", p.step_seconds));
    }
    write_text(&stage.path().join("sweep.csv"), &metrics)?;
    let timing_dir = stage.path().join("timing");
    std::fs::create_dir_all(&timing_dir).map_err(io(&timing_dir))?;
    write_text(&timing_dir.join("timing.csv"), &timing)?;
    write_provenance(stage.path(), "sweep", cfg, &[&cfg.paths.bundle, &cfg.paths.data])?;
    Ok((stage.commit()?, points))
}

/// Quantile-band plots for one filtered sequence, and bar charts of any
/// ablation or evaluation results present under `<out>`.
pub fn plot(cfg: &RunConfig, sequence: usize) -> Result<PathBuf, CommandError> {
    let stage = Staged::new(&cfg.paths.out.join("plot"))?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    let traj_path = cfg.paths.out.join("filter").join(format!("{}.jsonl", seq_name(sequence)));
    if traj_path.exists() {
        let file = read_trajectory(&traj_path)?;
        let truth = load_split(cfg, "test").ok().and_then(|d| d.rollouts.get(sequence).map(|r| r.x.clone()));
        for dim in 0..file.header.dim {
            let rows = band_rows(&file, dim, truth.as_deref()).ok_or_else(|| {
                CommandError::Config("trajectory has no particles to plot (eval.save_particles)".into())
            })?;
            let stem = format!("{}_dim{dim}", seq_name(sequence));
            write_text(&stage.path().join(format!("{stem}.csv")), &band_csv(&rows))?;
            write_text(
                &stage.path().join(format!("{stem}.svg")),
                &band_svg(&format!("{} dimension {dim}", seq_name(sequence)), &rows),
            )?;
        }
        inputs.push(traj_path);
    }
    let table = cfg.paths.out.join("ablate").join("ablation.csv");
    if table.exists() {
        let text = std::fs::read_to_string(&table).map_err(io(&table))?;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut spread = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| CommandError::Io(format!("{}: malformed row `{line}`", table.display())))
            };
            if f.len() < 3 {
                return Err(CommandError::Io(format!("{}: malformed row `{line}`", table.display())));
            }
            labels.push(f[0].to_string());
            values.push(parse(f[1])?);
            spread.push(parse(f[2])?);
        }
        write_text(&stage.path().join("ablation.svg"), &bar_svg("M_IQM by variant", &labels, &values, Some(&spread)))?;
        inputs.push(table);
    }
    if inputs.is_empty() {
        return Err(CommandError::Config(format!(
            "nothing to plot under {}; run filter or ablate first",
            cfg.paths.out.display()
        )));
    }
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_provenance(stage.path(), "plot", cfg, &refs)?;
    stage.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CommandError::Config("x".into()).exit_code(), 2);
        assert_eq!(CommandError::Numeric("x".into()).exit_code(), 3);
        assert_eq!(CommandError::Io("x".into()).exit_code(), 4);
        let e: CommandError = ModelError::Diverged {
            stage: "denoiser",
            step: 3,
            loss: f64::NAN,
        }
        .into();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn failed_stage_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        {
            let s = Staged::new(&target).unwrap();
            std::fs::write(s.path().join("partial.txt"), "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        let s = Staged::new(&target).unwrap();
        std::fs::write(s.path().join("a.txt"), "x").unwrap();
        s.commit().unwrap();
        assert!(target.join("a.txt").exists());
    }

    #[test]
    fn sweep_grid_uses_base_for_unset_axes() {
        let mut cfg = RunConfig::default();
        cfg.sweep.particles = vec![10, 100];
        cfg.sweep.warm_start = vec![0.2, 0.5, 0.8];
        let pts = sweep_points(&cfg);
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.steps == cfg.inference.steps));
    }
}
