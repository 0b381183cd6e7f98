//! The `dnpf` command sequence driven from code on a small linear-Gaussian
//! configuration, writing under a temporary directory.
//!
//! `cargo run --release --example cli_pipeline`

use dnpf::commands;
use dnpf::config::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join(format!("dnpf-pipeline-{}", std::process::id()));
    let overrides: Vec<String> = [
        "data.train_rollouts=100",
        "data.val_rollouts=20",
        "data.test_rollouts=8",
        "train.max_steps=1500",
        "inference.particles=128",
        "sweep.particles=[16,64,256]",
        "sweep.sequences=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        format!("paths.data={}", root.join("data").display()),
        format!("paths.bundle={}", root.join("bundle").display()),
        format!("paths.out={}", root.join("out").display()),
    ])
    .collect();
    let cfg = RunConfig::load(None, &overrides)?;
    println!("config hash {}", cfg.hash());

    commands::simulate(&cfg)?;
    commands::train(&cfg)?;
    commands::filter(&cfg)?;
    let eval = commands::eval(&cfg)?;
    print!("{}", std::fs::read_to_string(eval.join("metrics.txt"))?);
    let ablate = commands::ablate(&cfg)?;
    print!("{}", std::fs::read_to_string(ablate.join("ablation.txt"))?);
    let (_, points) = commands::sweep(&cfg)?;
    for p in points {
        println!("N={:<4} M_IQM {:.4}  {:.3} ms/step", p.particles, p.m_iqm, p.step_seconds * 1e3);
    }
    let plots = commands::plot(&cfg, 0)?;
    println!("plots in {}", plots.display());
    Ok(())
}
