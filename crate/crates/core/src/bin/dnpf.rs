use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dnpf::commands::{self, CommandError};
use dnpf::config::RunConfig;

#[derive(Parser)]
#[command(name = "dnpf", version, about = "Denoising particle filter toolkit")]
struct Cli {
    /// JSON run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set inference.particles=512`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, validation and test rollouts.
    Simulate,
    /// Train a model bundle.
    Train,
    /// Filter the test rollouts.
    Filter,
    /// Score filtered trajectories.
    Eval,
    /// Compare inference variants.
    Ablate,
    /// Sweep inference settings and record runtime.
    Sweep,
    /// Render bands and bar charts from earlier outputs.
    Plot {
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
    /// Print the resolved configuration.
    Config,
}

fn init_threads() -> Result<(), CommandError> {
    let Ok(v) = std::env::var("DNPF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CommandError::Config(format!("DNPF_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CommandError::Config("DNPF_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CommandError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CommandError> {
    init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let out = match cli.command {
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Filter => commands::filter(&cfg)?,
        Command::Eval => {
            let dir = commands::eval(&cfg)?;
            if let Ok(text) = std::fs::read_to_string(dir.join("metrics.txt")) {
                print!("{text}");
            }
            dir
        }
        Command::Ablate => {
            let dir = commands::ablate(&cfg)?;
            if let Ok(text) = std::fs::read_to_string(dir.join("ablation.txt")) {
                print!("{text}");
            }
            dir
        }
        Command::Sweep => {
            let (dir, points) = commands::sweep(&cfg)?;
            for p in points {
                println!(
                    "N={} K={} s_w={} eta={} theta={}  M_IQM={:.4}  step={:.4}s",
                    p.particles, p.steps, p.warm_start, p.guidance, p.theta, p.m_iqm, p.step_seconds
                );
            }
            dir
        }
        Command::Plot { sequence } => commands::plot(&cfg, sequence)?,
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("serializable"));
            return Ok(());
        }
    };
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
