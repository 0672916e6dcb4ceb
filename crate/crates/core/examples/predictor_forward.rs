//! One pass of the target content predictor: the action, the source patches
//! and one mask token per block position go in; the block's predicted
//! patches come out in block order.
//!
//! `cargo run --example predictor_forward`

use predictive_cir::encoder::{FrozenDualEncoder, ToyDualEncoder};
use predictive_cir::params::ParamStore;
use predictive_cir::predictor::{init_predictor, predict, PredictorConfig};
use predictive_cir::view_forge::{make_triplet, sample_mask_block, synth_dataset, SynthConfig, ViewConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> predictive_cir::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let encoder = ToyDualEncoder::toy(0);
    let pair = &synth_dataset(1, &SynthConfig::default(), &mut rng)[0];
    let triplet = make_triplet(pair, &ViewConfig::default(), &mut rng)?;
    let source = encoder.encode_image_any(&triplet.source_image)?;
    let action = encoder.encode_text(&triplet.action_text)?.cls;

    let cfg = PredictorConfig::toy();
    let mut params = ParamStore::new();
    init_predictor(&cfg, &mut params, &mut rng)?;
    println!("predictor: {} blocks, width {}, {} parameters", cfg.depth, cfg.width, params.num_scalars());

    let block = sample_mask_block(cfg.grid, &ViewConfig::default().crop, false, &mut rng)?;
    let out = predict(&params, &cfg, &action, &source, &block)?;
    println!("block positions {:?}", block.indices());
    println!(
        "action_out {:?}, enhanced_source {:?}, predicted_patches {:?}",
        out.action_out.dim(),
        out.enhanced_source.dim(),
        out.predicted_patches.dim()
    );

    let silent = predict(&params, &PredictorConfig { zero_action: true, ..cfg }, &action, &source, &block)?;
    let shift = (&out.predicted_patches - &silent.predicted_patches).mapv(f64::abs);
    println!("zeroing the action moves predictions by up to {:.4}", shift.fold(0.0f64, |a, &b| a.max(b)));
    Ok(())
}
