//! Writes a small synthetic corpus to disk and reads it back.
//!
//! `cargo run --example synth_data -- [n] [out_dir]`

use std::path::PathBuf;

use predictive_cir::view_forge::{load_pairs, synth_dataset, write_dataset, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> predictive_cir::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pcir-synth"));

    let pairs = synth_dataset(n, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(7));
    for p in pairs.iter().take(5) {
        println!("{}  {:?}", p.id, p.caption);
    }
    let manifest = write_dataset(&out, &pairs)?;
    let back = load_pairs(&manifest)?;
    assert_eq!(back, pairs);
    println!("{} pairs round-tripped through {}", back.len(), manifest.display());
    Ok(())
}
