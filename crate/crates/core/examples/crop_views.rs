//! Source/target views and mask blocks drawn from the crop law.
//!
//! `cargo run --example crop_views`

use predictive_cir::view_forge::{
    make_triplet, sample_mask_block, synth_dataset, CropConfig, SynthConfig, ViewConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> predictive_cir::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = synth_dataset(4, &SynthConfig::default(), &mut rng);
    let view = ViewConfig::default();
    println!("{:<12} {:>9} {:>9} {:>6} {:>6}  area", "id", "offset", "size", "s", "r");
    for pair in &pairs {
        let t = make_triplet(pair, &view, &mut rng)?;
        let c = t.crop_spec;
        let (w, h) = t.target_image.dimensions();
        println!(
            "{:<12} {:>4},{:<4} {:>4}x{:<4} {:>6.3} {:>6.3}  {:.3}",
            t.id,
            c.x,
            c.y,
            c.width,
            c.height,
            c.scale,
            c.aspect,
            c.area_fraction(w, h)
        );
    }

    println!("\nmask blocks on a 4x4 grid:");
    for _ in 0..4 {
        let b = sample_mask_block(4, &CropConfig::default(), false, &mut rng)?;
        let mut grid = [['.'; 4]; 4];
        for (r, c) in b.indices() {
            grid[r][c] = '#';
        }
        let rows: Vec<String> = grid.iter().map(|r| r.iter().collect()).collect();
        println!("{}  ({} cells)", rows.join(" "), b.len());
    }
    Ok(())
}
