//! Gated fusion of source and predicted content into `S*`. At gate zero the
//! token is exactly the source mapping; opening the gate mixes in the mean
//! of the mapped predictor rows.
//!
//! `cargo run --example fuse_pseudo_token`

use predictive_cir::alignment::{fuse, init_fusion, FusionConfig, FusionOrder, GateMode, GATE};
use predictive_cir::params::{normal_matrix, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> predictive_cir::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = FusionConfig {
        feature_dim: 32,
        width: 64,
        gate: GateMode::Tanh,
        order: FusionOrder::MapThenAverage,
    };
    let mut params = ParamStore::new();
    init_fusion(&cfg, &mut params, &mut rng);

    let enhanced = normal_matrix(16, 64, 1.0, &mut rng);
    let predicted = normal_matrix(4, 64, 1.0, &mut rng);
    let global = normal_matrix(1, 32, 1.0, &mut rng).row(0).to_owned();

    let closed = fuse(&params, &cfg, &enhanced, &predicted, &global)?;
    let perturbed = fuse(&params, &cfg, &(&enhanced * 5.0), &(&predicted + 3.0), &global)?;
    println!("gate 0: perturbing predictor rows changes S*: {}", closed != perturbed);

    for alpha in [0.25, 1.0, 3.0] {
        params.get_mut(GATE).expect("gate").fill(alpha);
        let open = fuse(&params, &cfg, &enhanced, &predicted, &global)?;
        let d = &open.0 - &closed.0;
        println!("alpha {alpha:>4}: tanh {:.3}, |S* - source| {:.4}", f64::tanh(alpha), d.dot(&d).sqrt());
    }
    Ok(())
}
