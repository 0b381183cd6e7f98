//! Adds a position sensor on the spun object at inference time, without
//! retraining, and scores the sensed components.
//!
//! `cargo run --release --example sensor_fusion -- [train_steps] [sensor_std]`

use dnpf::eval::{default_sigma2, gmm_nll_dims, iqm, sequence_metric, sequence_seed};
use dnpf::filter::{filter_rollout, FilterInput, GaussianSensorModel, InferenceConfig, Trajectory};
use dnpf::models::{ArchConfig, TrainConfig};
use dnpf::pipeline::{fit_bundle, normalized_states};
use dnpf::tasks::{compute_stats, simulate_rollouts, SpinContact, SpinContactParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let std: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);

    let task = SpinContact::new(SpinContactParams::default()).unwrap();
    let train = simulate_rollouts(&task, 200, 50, 100);
    let val = simulate_rollouts(&task, 40, 50, 200);
    let test = simulate_rollouts(&task, 16, 50, 300);
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

    let raw = GaussianSensorModel {
        h: vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
        offset: vec![0.0; 2],
        r: vec![std * std; 2],
    };
    let sensor = GaussianSensorModel::from_raw(raw.h.clone(), raw.offset.clone(), raw.r.clone(), &stats.x);
    let dims = [2, 3];
    let (mut plain, mut fused, mut alone) = (Vec::new(), Vec::new(), Vec::new());
    for (k, rec) in test.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let readings: Vec<Option<Vec<f64>>> = rec.x.iter().map(|x| Some(raw.sample(x, &mut rng))).collect();
        let truth = normalized_states(rec, &stats);
        let score = |t: &Trajectory| {
            let v: Vec<f64> = t
                .steps
                .iter()
                .zip(&truth)
                .map(|(s, g)| gmm_nll_dims(&s.particles.states, None, 4, &dims, g, default_sigma2()))
                .collect();
            sequence_metric(&v, 2)
        };
        let c = InferenceConfig {
            particles: 64,
            seed: sequence_seed(7, k),
            ..InferenceConfig::default()
        };
        let mut input = FilterInput::from_rollout(rec, &stats);
        plain.push(score(&filter_rollout(&model, &input, &c, None, None).unwrap()));
        input.sensor = Some(readings.clone());
        fused.push(score(&filter_rollout(&model, &input, &c, None, Some(&sensor)).unwrap()));
        let v: Vec<f64> = readings
            .iter()
            .zip(&truth)
            .map(|(r, g)| {
                let p = sensor.flat_prior_samples(&dims, r.as_ref().unwrap(), 64, &mut rng).unwrap();
                gmm_nll_dims(&p, None, 2, &[0, 1], &[g[2], g[3]], default_sigma2())
            })
            .collect();
        alone.push(sequence_metric(&v, 2));
    }
    println!("object position M_IQM");
    println!("  filter          {:.4}", iqm(&plain));
    println!("  filter + sensor {:.4}", iqm(&fused));
    println!("  sensor only     {:.4}", iqm(&alone));
}
