//! Full model against the no-action, no-crop and ungated variants, each
//! trained under the same seed and budget.
//!
//! cargo run --example ablations -- [seeds] [key=value ...]

use predictive_cir::train::{overfit_run, TrainConfig};

fn main() -> predictive_cir::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let extra: Vec<String> = args.collect();
    for seed in 0..seeds {
        for variant in ["full", "no_action", "no_crop", "no_gate"] {
            let mut config = TrainConfig::toy();
            config.seed = seed;
            for o in &extra {
                config.apply_override(o)?;
            }
            if variant != "full" {
                config.apply_override(&format!("{variant}=true"))?;
            }
            let o = overfit_run(&config, 32)?;
            println!(
                "seed {seed} {variant:<10} R@1 {:.3}  R@5 {:.3}  L_pred ratio {:.3}  {:.0?}",
                o.recall_at_1(),
                o.report.recall_at(5).unwrap_or(f64::NAN),
                o.prediction_ratio(),
                o.elapsed
            );
        }
    }
    Ok(())
}
