//! Library-level round trips: gallery caches, query files and ranking.

use predictive_cir::encoder::{FrozenDualEncoder, ToyDualEncoder};
use predictive_cir::retrieval::{
    composite_queries, load_queries, normalize_ks, rank, write_queries, Gallery, Similarity,
};
use predictive_cir::view_forge::{synth_dataset, CropConfig, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pairs(n: usize) -> Vec<predictive_cir::view_forge::RawPair> {
    synth_dataset(n, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(5))
}

#[test]
fn every_gallery_item_retrieves_itself_first() {
    let encoder = ToyDualEncoder::toy(0);
    let gallery = Gallery::from_pairs(&encoder, &pairs(20)).unwrap();
    for (i, id) in gallery.ids.iter().enumerate() {
        let ranked = rank(gallery.features.row(i), &gallery, Similarity::Cosine).unwrap();
        assert_eq!(&ranked.ids[0], id);
    }
}

#[test]
fn dot_ranking_matches_a_brute_force_sort() {
    let encoder = ToyDualEncoder::toy(0);
    let gallery = Gallery::from_pairs(&encoder, &pairs(20)).unwrap();
    for i in 0..gallery.len() {
        let q = gallery.features.row(i);
        let mut want: Vec<(f64, &String)> =
            gallery.ids.iter().enumerate().map(|(j, id)| (q.dot(&gallery.features.row(j)), id)).collect();
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let got = rank(q, &gallery, Similarity::Dot).unwrap();
        let want_ids: Vec<String> = want.iter().map(|(_, id)| (*id).clone()).collect();
        assert_eq!(got.ids, want_ids);
    }
}

#[test]
fn gallery_cache_round_trips_and_carries_encoder_checksum() {
    let encoder = ToyDualEncoder::toy(0);
    let gallery = Gallery::from_pairs(&encoder, &pairs(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    gallery.save(&path, &encoder.checksum()).unwrap();
    let (back, checksum) = Gallery::load(&path).unwrap();
    assert_eq!(back.ids, gallery.ids);
    assert_eq!(back.features, gallery.features);
    assert_eq!(checksum, encoder.checksum());
    assert_ne!(checksum, ToyDualEncoder::toy(1).checksum());
}

#[test]
fn query_files_round_trip() {
    let ps = pairs(5);
    let queries = composite_queries(&ps, &CropConfig::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_queries(dir.path(), &queries).unwrap();
    let back = load_queries(&path).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in back.iter().zip(&queries) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.truths, b.truths);
        assert_eq!(a.template, b.template);
        assert_eq!(a.reference, b.reference);
    }
    assert_eq!(composite_queries(&ps, &CropConfig::default(), 3).unwrap()[0].reference, queries[0].reference);
}

#[test]
fn cutoffs_are_sorted_and_deduplicated() {
    assert_eq!(normalize_ks(&[10, 1, 5, 5]).unwrap(), vec![1, 5, 10]);
    assert!(normalize_ks(&[]).is_err());
    assert!(normalize_ks(&[0, 1]).is_err());
}
