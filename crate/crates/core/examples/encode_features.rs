//! Frozen toy dual encoder: image features, caption summaries and a prompt
//! with an injected pseudo-token.
//!
//! `cargo run --example encode_features`

use ndarray::Array1;
use predictive_cir::encoder::{FrozenDualEncoder, PromptSequence, PseudoToken, ToyDualEncoder};
use predictive_cir::view_forge::{synth_dataset, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a) * b.dot(b)).sqrt()
}

fn main() -> predictive_cir::Result<()> {
    let encoder = ToyDualEncoder::toy(0);
    let profile = encoder.profile();
    println!(
        "profile: {}px images, {}x{} patches, d = {}",
        profile.image_size, profile.grid, profile.grid, profile.feature_dim
    );

    let pairs = synth_dataset(3, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
    let images: Vec<_> = pairs
        .iter()
        .map(|p| encoder.encode_image(&p.image))
        .collect::<Result<_, _>>()?;
    let texts: Vec<_> = pairs
        .iter()
        .map(|p| encoder.encode_text(&p.caption))
        .collect::<Result<_, _>>()?;
    for (p, f) in pairs.iter().zip(&images) {
        println!("{}: global {:?}, patches {:?}  {:?}", p.id, f.global.dim(), f.patches.dim(), p.caption);
    }
    println!("caption summary cosines:");
    for a in &texts {
        let row: Vec<String> = texts.iter().map(|b| format!("{:+.3}", cosine(&a.cls.0, &b.cls.0))).collect();
        println!("  {}", row.join(" "));
    }

    let seq = PromptSequence::from_text(encoder.tokenizer(), "a photo of [*], on a red wall")?;
    let a = encoder.encode_prompt(&seq.clone().inject(PseudoToken(images[0].global.clone())))?;
    let b = encoder.encode_prompt(&seq.inject(PseudoToken(images[1].global.clone())))?;
    println!("prompt embeddings for two pseudo-tokens: cosine {:.3}", cosine(&a, &b));
    Ok(())
}
