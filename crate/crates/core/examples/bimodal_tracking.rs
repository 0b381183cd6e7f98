//! Tracks `x` from `|x|` measurements. The filter should keep both signs
//! until the control pushes the state through zero.
//!
//! `cargo run --release --example bimodal_tracking -- [train_steps]`

use dnpf::eval::{grid_filter, GridSpec};
use dnpf::filter::{filter_rollout, FilterInput, InferenceConfig};
use dnpf::models::{ArchConfig, TrainConfig};
use dnpf::pipeline::fit_bundle;
use dnpf::tasks::{compute_stats, simulate_rollouts, AbsBimodal, AbsBimodalParams, RolloutRecord, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let task = AbsBimodal::new(AbsBimodalParams::default()).unwrap();
    let train = simulate_rollouts(&task, 400, 50, 100);
    let val = simulate_rollouts(&task, 40, 50, 200);
    let stats = compute_stats(&task, &train);
    let cfg = TrainConfig {
        epochs: 1000,
        max_steps: Some(steps),
        eval_every: 250,
        ..TrainConfig::default()
    };
    let (bundle, _) = fit_bundle(&train, &val, &stats, &ArchConfig::default(), &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut rec = RolloutRecord {
        task: task.name().into(),
        seed: 50,
        x: vec![vec![1.0]],
        y: vec![],
        u: vec![vec![0.0]],
        obs: vec![true],
    };
    rec.y.push(task.observe(&rec.x[0], &rec.u[0], &mut rng));
    for t in 1..=30 {
        let u = vec![if t <= 10 { 0.0 } else { -0.15 }];
        let x = task.step(&rec.x[t - 1], &u, &mut rng);
        rec.y.push(task.observe(&x, &u, &mut rng));
        rec.x.push(x);
        rec.u.push(u);
        rec.obs.push(true);
    }

    let grid = grid_filter(&task, &rec, &GridSpec::new_1d(-5.0, 5.0, 1000)).unwrap();
    let c = InferenceConfig {
        particles: 512,
        ..InferenceConfig::default()
    };
    let traj = filter_rollout(&bundle.model(true), &FilterInput::from_rollout(&rec, &stats), &c, None, None).unwrap();
    println!(" t   truth   P(x>0) filter   P(x>0) grid");
    for (t, step) in traj.steps.iter().enumerate().step_by(2) {
        let p = &step.particles;
        let pos = p.states.iter().filter(|v| stats.x.denormalize(&[**v])[0] > 0.0).count() as f64 / p.len() as f64;
        println!("{t:>2} {:>7.3} {pos:>15.3} {:>13.3}", rec.x[t][0], grid.mass_where(t, |x| x[0] > 0.0));
    }
}
