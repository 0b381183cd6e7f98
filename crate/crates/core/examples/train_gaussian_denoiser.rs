//! Trains the conditional denoiser on a static Gaussian pair `y ~ N(0, 1)`,
//! `x | y ~ N(y, σ²)` and compares it with the closed-form noise prediction.
//!
//! `cargo run --release --example train_gaussian_denoiser -- [pairs] [steps]`

use dnpf::diffusion::NoiseSchedule;
use dnpf::models::{train, ArchConfig, ModelBundle, TrainConfig, TransitionBatch};
use dnpf::tasks::{GaussianConditional, NormStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pairs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let task = GaussianConditional::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = task.sample_pairs(pairs, &mut rng);
    let (vx, vy) = task.sample_pairs(4096, &mut rng);
    let mut bundle = ModelBundle::new(ArchConfig::default(), NormStats::identity(1, 1, 0), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1000,
        max_steps: Some(steps),
        eval_every: 250,
        patience: 100,
        ..TrainConfig::default()
    };
    let report = train(
        &mut bundle,
        &TransitionBatch::from_pairs(1, 1, &x, &y),
        &TransitionBatch::from_pairs(1, 1, &vx, &vy),
        &cfg,
    )
    .unwrap();

    let schedule = NoiseSchedule::new(50).unwrap();
    let den = report.denoiser.expect("denoiser stage ran");
    let floor = task.dsm_floor(&schedule, cfg.p_drop);
    println!("validation loss {:.4}, irreducible {:.4}, ratio {:.3}", den.best_val, floor, den.best_val / floor);

    let model = bundle.model(true);
    println!("   s      y     x_s   learned  analytic");
    for s in [0.3, 0.6, 0.9] {
        let (a, b) = schedule.alpha_beta(s).unwrap();
        for y in [-1.0, 0.0, 1.0] {
            let enc = model.encode_observation(&[y], &[y]).unwrap();
            let film = model.film_vectors(Some(&enc), &[s]).unwrap();
            let xs = a * y + 0.5;
            let e = model.denoiser_predict(&[xs], Some(&film[0]), s).unwrap()[0];
            println!("{s:>4} {y:>6.2} {xs:>7.3} {e:>9.4} {:>9.4}", task.conditional_noise(xs, y, a, b));
        }
    }
}
