use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FilterError, StepDiagnostics, Trajectory};
use crate::tasks::DimStats;
use crate::write_json_line;

pub const TRAJECTORY_FORMAT: &str = "dnpf-trajectory";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub particles: usize,
    pub horizon: usize,
    pub with_particles: bool,
}

/// One timestep in state units (denormalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub t: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<Vec<Vec<f64>>>,
    pub diag: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub header: TrajectoryHeader,
    pub steps: Vec<TrajectoryLine>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FilterError + '_ {
    move |source| FilterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Converts a trajectory to state units.
pub fn trajectory_lines(traj: &Trajectory, x_stats: &DimStats, with_particles: bool) -> Vec<TrajectoryLine> {
    traj.steps
        .iter()
        .map(|s| {
            let p = &s.particles;
            let raw: Vec<Vec<f64>> = p.states.chunks_exact(p.dim).map(|r| x_stats.denormalize(r)).collect();
            let n = raw.len() as f64;
            let mut mean = vec![0.0; p.dim];
            for r in &raw {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; p.dim];
            for r in &raw {
                for j in 0..p.dim {
                    var[j] += (r[j] - mean[j]).powi(2) / n;
                }
            }
            TrajectoryLine {
                t: p.t,
                mean,
                var,
                particles: with_particles.then_some(raw),
                diag: s.diag.clone(),
            }
        })
        .collect()
}

/// Writes a JSON-lines trajectory. Wall times are not included, so the file
/// is a deterministic function of the inputs and seed.
pub fn write_trajectory(
    path: &Path,
    traj: &Trajectory,
    x_stats: &DimStats,
    with_particles: bool,
) -> Result<(), FilterError> {
    let header = TrajectoryHeader {
        format: TRAJECTORY_FORMAT.into(),
        version: VERSION,
        dim: traj.dim(),
        particles: traj.steps.first().map_or(0, |s| s.particles.len()),
        horizon: traj.steps.len().saturating_sub(1),
        with_particles,
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_json_line(&mut w, &header).map_err(io_err(path))?;
    for line in trajectory_lines(traj, x_stats, with_particles) {
        write_json_line(&mut w, &line).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile, FilterError> {
    let file = File::open(path).map_err(io_err(path))?;
    let fmt = |message: String| FilterError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| fmt("empty file".into()))?.map_err(io_err(path))?;
    let header: TrajectoryHeader = serde_json::from_str(&first).map_err(|e| fmt(format!("header: {e}")))?;
    if header.format != TRAJECTORY_FORMAT || header.version != VERSION {
        return Err(fmt(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut steps = Vec::with_capacity(header.horizon + 1);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: TrajectoryLine = serde_json::from_str(&line).map_err(|e| fmt(format!("line {}: {e}", k + 2)))?;
        if step.mean.len() != header.dim {
            return Err(fmt(format!("line {}: wrong state dimension", k + 2)));
        }
        steps.push(step);
    }
    if steps.len() != header.horizon + 1 {
        return Err(fmt(format!("expected {} steps, found {}", header.horizon + 1, steps.len())));
    }
    Ok(TrajectoryFile { header, steps })
}

/// Per-step wall times, kept apart from the trajectory.
pub fn write_timing(path: &Path, traj: &Trajectory) -> Result<(), FilterError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "t,wall_seconds").map_err(io_err(path))?;
    for s in &traj.steps {
        writeln!(w, "{},{}", s.particles.t, s.wall_seconds).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
