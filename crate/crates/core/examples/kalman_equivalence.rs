//! Runs the filter with closed-form Gaussian scores on linear-Gaussian tasks
//! and compares it with the Kalman filter.
//!
//! `cargo run --release --example kalman_equivalence -- [seeds] [particles]`

use dnpf::eval::kalman_for_task;
use dnpf::filter::{filter_rollout, FilterInput, InferenceConfig};
use dnpf::models::GaussianScores;
use dnpf::tasks::{compute_stats, simulate_rollout, simulate_rollouts, LinearGaussian, LinearGaussianParams, Task};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let particles: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(512);

    for params in [LinearGaussianParams::default(), LinearGaussianParams::four_d()] {
        let task = LinearGaussian::new(params).expect("valid task");
        let stats = compute_stats(&task, &simulate_rollouts(&task, 200, 50, 1));
        let scores = GaussianScores::linear_task(task.model(), &stats).expect("analytic scores");
        let mut cfg = InferenceConfig {
            particles,
            steps: 50,
            warm_start: 0.0,
            guidance: 0.0,
            ..InferenceConfig::default()
        };
        cfg.constraint.enabled = false;

        let d = task.state_dim();
        let (mut err, mut n) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for seed in 0..seeds {
            let rec = simulate_rollout(&task, 1000 + seed, 50);
            let kf = kalman_for_task(&task, &rec).expect("linear task");
            let run = InferenceConfig { seed, ..cfg.clone() };
            let traj = filter_rollout(&scores, &FilterInput::from_rollout(&rec, &stats), &run, None, None)
                .expect("filter run");
            for t in 1..traj.steps.len() {
                let (m, v) = (traj.steps[t].particles.mean(), traj.steps[t].particles.variance());
                for j in 0..d {
                    let s = stats.x.std[j];
                    let km = (kf[t].mean[j] - stats.x.mean[j]) / s;
                    let kv = kf[t].cov[(j, j)] / (s * s);
                    err += (m[j] - km).abs();
                    n += 1;
                    lo = lo.min(v[j] / kv);
                    hi = hi.max(v[j] / kv);
                }
            }
        }
        println!(
            "{d}-D: mean |mean error| {:.4} (normalized units), variance ratio range [{lo:.3}, {hi:.3}]",
            err / n as f64
        );
    }
}
