//! Finite-difference check of the full training objective on a small graph.
//!
//! `cargo run --example gradient_check -- [seed]`

use predictive_cir::verify::{grad_check, GradCheckConfig};

fn main() -> predictive_cir::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&cfg)?;
    println!("{:<40} {:>7} {:>12}", "parameter", "coords", "rel error");
    for g in &report.groups {
        println!("{:<40} {:>7} {:>12.3e}", g.name, g.checked, g.rel_error);
    }
    println!("prompt JVP rel error {:.3e}", report.prompt_rel_error);
    println!(
        "max rel error {:.3e} in {:.1}s",
        report.max_rel_error,
        report.elapsed.as_secs_f64()
    );
    Ok(())
}
