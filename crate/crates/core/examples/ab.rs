//! Masked-versus-unmasked comparison. Budget via environment:
//! `AB_STEPS`, `AB_BATCH`, `AB_TRAIN`, `AB_TEST`, `AB_SAMPLER_STEPS`, `AB_SEED`.
//! `AB_REPORT` names a file for the full JSON report.

use idattn::experiment::{ab_experiment, AbConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = AbConfig::default();
    let cfg = AbConfig {
        steps: env("AB_STEPS", d.steps),
        batch: env("AB_BATCH", d.batch),
        n_train: env("AB_TRAIN", d.n_train),
        n_test: env("AB_TEST", d.n_test),
        sampler_steps: env("AB_SAMPLER_STEPS", d.sampler_steps),
        seed: env("AB_SEED", d.seed),
        ..d
    };
    let start = std::time::Instant::now();
    let r = ab_experiment(&cfg, |m| eprintln!("[{:>6.0}s] {m}", start.elapsed().as_secs_f64()))?;
    for arm in [&r.idattn, &r.unmasked] {
        println!(
            "{:<12} loss {:.4}  mae_b {:.4}  leakage {:.4} ({} probes)  cer {:.4}  ar {:.1}",
            arm.label, arm.final_loss, arm.mae_b, arm.leakage, arm.probes, arm.report.aggregate.cer, arm.report.aggregate.attempt_rate
        );
    }
    println!("lower mae_b: {}  lower leakage: {}", r.lower_mae_b(), r.lower_leakage());
    if let Ok(path) = std::env::var("AB_REPORT") {
        std::fs::write(path, serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}
