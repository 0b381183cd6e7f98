//! Trains on the spin-contact task and compares the inference variants.
//!
//! `cargo run --release --example spin_contact_ablation -- [train_steps] [seed]`

use dnpf::eval::{default_sigma2, run_ablations, AblationVariant, Component};
use dnpf::filter::InferenceConfig;
use dnpf::models::{ArchConfig, TrainConfig};
use dnpf::pipeline::{evaluation_set, fit_bundle};
use dnpf::tasks::{compute_stats, simulate_rollouts, SpinContact, SpinContactParams};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let task = SpinContact::new(SpinContactParams::default()).unwrap();
    let train = simulate_rollouts(&task, 200, 50, 100);
    let val = simulate_rollouts(&task, 40, 50, 200);
    let test = simulate_rollouts(&task, 16, 50, 300);
    let stats = compute_stats(&task, &train);
    let cfg = TrainConfig {
        seed,
        epochs: 1000,
        max_steps: Some(steps),
        eval_every: 250,
        patience: 8,
        ..TrainConfig::default()
    };
    let (bundle, report) = fit_bundle(&train, &val, &stats, &ArchConfig::default(), &cfg).unwrap();
    if let (Some(d), Some(f)) = (&report.denoiser, &report.dynamics) {
        println!("denoiser val {:.4} after {} steps; dynamics val {:.4} after {} steps", d.best_val, d.steps, f.best_val, f.steps);
    }

    let (inputs, truth) = evaluation_set(&test, &stats);
    let base = InferenceConfig {
        particles: 64,
        seed: 7,
        ..InferenceConfig::default()
    };
    let components = vec![Component::new("agent", &[0, 1]), Component::new("object", &[2, 3])];
    let reports = run_ablations(
        &bundle.model(true),
        &inputs,
        &truth,
        &AblationVariant::ALL,
        &base,
        &components,
        default_sigma2(),
    )
    .unwrap();
    for r in &reports {
        println!("{}", r.to_text());
    }
}
