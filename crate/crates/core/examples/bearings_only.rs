//! Bearings-only tracking: a learned filter against a bootstrap particle
//! filter that uses the true densities.
//!
//! `cargo run --release --example bearings_only -- [train_steps]`

use dnpf::eval::{bootstrap_pf, default_sigma2, gmm_nll, iqm, sequence_metric, sequence_seed};
use dnpf::filter::{filter_rollout, FilterInput, InferenceConfig};
use dnpf::models::{ArchConfig, TrainConfig};
use dnpf::pipeline::{fit_bundle, normalized_states};
use dnpf::tasks::{compute_stats, simulate_rollouts, BearingsOnly, BearingsOnlyParams};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let task = BearingsOnly::new(BearingsOnlyParams::default()).unwrap();
    let train = simulate_rollouts(&task, 300, 50, 100);
    let val = simulate_rollouts(&task, 40, 50, 200);
    let test = simulate_rollouts(&task, 8, 50, 300);
    let stats = compute_stats(&task, &train);
    let cfg = TrainConfig {
        epochs: 1000,
        max_steps: Some(steps),
        eval_every: 250,
        patience: 8,
        ..TrainConfig::default()
    };
    let (bundle, _) = fit_bundle(&train, &val, &stats, &ArchConfig::default(), &cfg).unwrap();
    let model = bundle.model(true);
    let s2 = default_sigma2();

    let (mut learned, mut reference) = (Vec::new(), Vec::new());
    for (k, rec) in test.iter().enumerate() {
        let truth = normalized_states(rec, &stats);
        let c = InferenceConfig {
            particles: 256,
            seed: sequence_seed(3, k),
            ..InferenceConfig::default()
        };
        let t = filter_rollout(&model, &FilterInput::from_rollout(rec, &stats), &c, None, None).unwrap();
        let v: Vec<f64> = t.steps.iter().zip(&truth).map(|(s, g)| gmm_nll(&s.particles, g, s2)).collect();
        learned.push(sequence_metric(&v, 4));

        let pf = bootstrap_pf(&task, rec, 256, k as u64).unwrap();
        let v: Vec<f64> = pf
            .steps
            .iter()
            .zip(&truth)
            .map(|(p, g)| {
                let mut p = p.clone();
                p.states = p.states.chunks(4).flat_map(|x| stats.x.normalize(x)).collect();
                gmm_nll(&p, g, s2)
            })
            .collect();
        reference.push(sequence_metric(&v, 4));
    }
    println!("M_IQM learned filter       {:.4}", iqm(&learned));
    println!("M_IQM bootstrap (true model) {:.4}", iqm(&reference));
}
