//! Runs the ablation study on synthetic data for several seeds and prints
//! validation NLL and test CRPS_sum per variant, next to the CRPS_sum of
//! the generator's own predictive distribution.
//!
//! Usage: `cargo run --release --example ablation -- [seeds] [max_steps] [lr]`

use std::time::Instant;

use curvecov::dataio::SynthConfig;
use curvecov::forecaster::TrainConfig;
use curvecov::metrics::crps_gaussian;
use curvecov::pipeline::{ablation_study, origins, synthetic, ForecastPlan};

fn main() -> curvecov::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let steps: usize = args.get(2).map_or(1000, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.003, |s| s.parse().unwrap());
    let total = Instant::now();
    for seed in 0..seeds {
        let synth = SynthConfig {
            nodes: 20,
            steps: 3000,
            seed,
            ..SynthConfig::default()
        };
        let (truth, prepared) = synthetic(&synth)?;
        let base = TrainConfig {
            max_steps: steps,
            learning_rate: lr,
            seed,
            eval_every: 100,
            max_val_windows: 60,
            ..TrainConfig::default()
        };
        let plan = ForecastPlan {
            samples: 50,
            stride: 24,
            seed,
            ..ForecastPlan::default()
        };
        let (mut crps, mut abs_y) = (0.0, 0.0);
        let phi = synth.ar_coef;
        for t0 in origins(prepared.val_end, prepared.values.nrows(), &plan) {
            for q in 0..plan.horizon {
                for i in 0..synth.nodes {
                    let dev = prepared.values[(t0 - 1, i)] - truth.seasonal(&synth, t0 - 1, i);
                    let mu = truth.seasonal(&synth, t0 + q, i) + phi.powi(q as i32 + 1) * dev;
                    let var: f64 = (0..=q).map(|k| phi.powi(2 * k as i32)).sum::<f64>()
                        * truth.noise_covariance[(i, i)];
                    let y = prepared.values[(t0 + q, i)];
                    crps += crps_gaussian(mu, var.sqrt(), y)?;
                    abs_y += y.abs();
                }
            }
        }
        println!("seed {seed} oracle         crps_sum {:.5}", crps / abs_y);
        let t = Instant::now();
        for r in ablation_study(&prepared, &base, &plan)? {
            println!(
                "seed {seed} {:<14} val_nll {:>9.3} crps_sum {:.5} mae {:.4}",
                r.name, r.best_val_nll, r.test.crps_sum, r.test.mae
            );
        }
        println!("seed {seed} took {:.1?}", t.elapsed());
    }
    println!("total {:.1?}", total.elapsed());
    Ok(())
}
