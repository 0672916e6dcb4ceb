//! Training, gallery embedding, query composition and evaluation through the
//! on-disk artifacts, as the command-line tool does it.
//!
//! `cargo run --example retrieve -- [steps]`

use predictive_cir::retrieval::{
    compose_query, composite_queries, evaluate, load_queries, rank, write_queries, Gallery, Similarity, Template,
};
use predictive_cir::train::{build_encoder, run_training, Checkpoint, RunOptions, TrainConfig};
use predictive_cir::view_forge::{load_pairs, synth_dataset, write_dataset, CropConfig, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> predictive_cir::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let dir = std::env::temp_dir().join("pcir-retrieve");
    let pairs = synth_dataset(32, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    let manifest = write_dataset(&dir.join("data"), &pairs)?;

    let config = TrainConfig {
        max_steps: steps,
        checkpoint_every: 0,
        ..TrainConfig::toy()
    };
    let opts = RunOptions {
        config: config.clone(),
        out_dir: dir.join("run"),
        resume: None,
    };
    let encoder = build_encoder(&config)?;
    let summary = run_training(&opts, encoder.clone(), load_pairs(&manifest)?, |_| {})?;
    let ckpt = Checkpoint::load(&summary.final_checkpoint)?;

    let gallery_path = dir.join("gallery.safetensors");
    Gallery::from_manifest(encoder.as_ref(), &manifest)?.save(&gallery_path, &encoder.checksum())?;
    let (gallery, _) = Gallery::load(&gallery_path)?;
    let queries_path = write_queries(&dir.join("queries"), &composite_queries(&pairs, &CropConfig::default(), 0)?)?;
    let queries = load_queries(&queries_path)?;

    let report = evaluate(&ckpt.mapper, encoder.as_ref(), &queries, &gallery, &[1, 5, 10], Similarity::Cosine)?;
    print!("{}", report.to_table());

    // One query by hand, with a different manipulation sentence.
    let q = &queries[0];
    let composed = compose_query(
        &ckpt.mapper,
        encoder.as_ref(),
        &q.reference,
        &Template::Sentence {
            text: "a red circle on a blue wall".into(),
        },
    )?;
    let ranked = rank(composed.embedding.view(), &gallery, Similarity::Cosine)?;
    println!("{:?} -> top 3 {:?}", composed.prompt, &ranked.ids[..3]);
    Ok(())
}
