//! Per-timestep wall time against particle count and denoising steps.
//!
//! `cargo run --release --example runtime_sweep`

use dnpf::filter::{filter_rollout, FilterInput, InferenceConfig};
use dnpf::models::{ArchConfig, ModelBundle};
use dnpf::tasks::{compute_stats, simulate_rollout, SpinContact, SpinContactParams};

fn main() {
    let task = SpinContact::new(SpinContactParams::default()).unwrap();
    let rec = simulate_rollout(&task, 3, 5);
    let stats = compute_stats(&task, std::slice::from_ref(&rec));
    let bundle = ModelBundle::new(ArchConfig::default(), stats.clone(), 0).unwrap();
    let model = bundle.model(true);
    let input = FilterInput::from_rollout(&rec, &stats);
    println!("rayon threads: {}", rayon::current_num_threads());
    println!("particles  steps  ms/timestep");
    for particles in [10, 100, 1000] {
        for steps in [10, 25, 50, 100] {
            let c = InferenceConfig {
                particles,
                steps,
                warm_start: 0.0,
                ..InferenceConfig::default()
            };
            let t = filter_rollout(&model, &input, &c, None, None).unwrap();
            let ms = t.steps[1..].iter().map(|s| s.wall_seconds).sum::<f64>() / (t.steps.len() - 1) as f64 * 1e3;
            println!("{particles:>9} {steps:>6} {ms:>12.3}");
        }
    }
}
