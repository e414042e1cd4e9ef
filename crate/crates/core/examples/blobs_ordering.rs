//! Compares SGD, SAM and NCSAM on noisy Gaussian blobs.
//!
//! Usage: `blobs_ordering [config.json] [seeds]`. Without a config a built-in
//! 10-class, 40% symmetric-noise setup is used.

use std::time::Instant;

use flatgrad::harness::run::{prepare_data, train};
use flatgrad::harness::{final_window_accuracy, ExperimentConfig};
use flatgrad::optim::OptimizerKind;

const DEFAULT: &str = r#"{
    "dataset": {"kind": "gaussian_blobs", "n": 6250, "dim": 20, "classes": 10, "separation": 6.0},
    "noise": {"kind": "symmetric", "rate": 0.4},
    "model": {"hidden": [64, 64]},
    "optimizer": "ncsam",
    "optimizer_config": {"learning_rate": 0.02, "sam_radius": 0.05, "kappa": 0.5, "warmup_optimizer": "sam"},
    "epochs": 60,
    "batch_size": 64,
    "lr_schedule": {"kind": "constant"},
    "output_dir": "unused",
    "diagnostics": {"distortion": false}
}"#;

fn main() -> flatgrad::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let base = match args.get(1).filter(|p| !p.is_empty()) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::from_json(DEFAULT)?,
    };
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    for kind in [OptimizerKind::Sgd, OptimizerKind::Sam, OptimizerKind::Ncsam] {
        let cfg = ExperimentConfig {
            optimizer: kind,
            ..base.clone()
        };
        let started = Instant::now();
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let data = prepare_data(&cfg, seed)?;
            let out = train(&cfg, seed, &data, false)?;
            if std::env::var_os("VERBOSE").is_some() {
                for m in &out.metrics {
                    println!(
                        "  {kind} e{:02} loss {:.3} train {:.3} test {:.4} noisy {:.3} s {:.3} corr {:.4}",
                        m.epoch,
                        m.train_loss,
                        m.train_acc,
                        m.test_acc,
                        m.noisy_subset_acc,
                        m.schedule_scale,
                        m.mean_correction_norm
                    );
                }
            }
            accs.push(final_window_accuracy(&out.metrics));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "{kind:>6}: mean {:.4} per-seed {:?} ({:.1}s)",
            mean,
            accs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
