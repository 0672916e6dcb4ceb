//! Overfits the toy configuration on 32 synthetic pairs, then retrieves
//! each pair from a crop of itself plus its caption.
//!
//! cargo run --example train_toy -- [steps] [seed] [key=value ...]

use predictive_cir::train::{overfit_run, TrainConfig};

fn main() -> predictive_cir::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::toy();
    if let Some(steps) = args.next() {
        config.max_steps = steps.parse().expect("steps");
    }
    if let Some(seed) = args.next() {
        config.seed = seed.parse().expect("seed");
    }
    for extra in args {
        config.apply_override(&extra)?;
    }

    let outcome = overfit_run(&config, 32)?;
    for m in outcome.metrics.iter().filter(|m| m.step == 1 || m.step % 50 == 0) {
        println!(
            "step {:>4}  L_pred {:.5}  L_align {:.4}  gate {:+.4}  |g| {:.3}",
            m.step, m.prediction, m.alignment, m.gate_value, m.grad_norm
        );
    }
    println!("{}", outcome.report.to_table());
    println!(
        "L_pred {:.5} -> {:.5} ({:.1}% of initial) in {:.1?}",
        outcome.initial_prediction,
        outcome.final_prediction,
        100.0 * outcome.prediction_ratio(),
        outcome.elapsed
    );
    Ok(())
}
