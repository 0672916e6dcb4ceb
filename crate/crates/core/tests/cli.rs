//! The `pcir` subcommands driven in-process through their parsed command
//! lines.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use predictive_cir::console::{run, Cli, RunManifest, RUN_MANIFEST};
use predictive_cir::train::{StepMetrics, FINAL_CHECKPOINT, METRICS_FILE};

fn pcir(args: &[&str]) -> i32 {
    let cli = Cli::try_parse_from(std::iter::once("pcir").chain(args.iter().copied())).expect("parses");
    run(cli)
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn metrics(dir: &Path) -> Vec<StepMetrics> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Relative paths of every file below `root`.
fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(pcir(&["synth-data", "--n", "5", "--seed", "9", "--out", &s(out)]), 0);
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    assert_eq!(manifest.lines().count(), 5);
    let files = files_under(&a);
    assert!(files.len() > 5);
    for rel in files {
        if rel != Path::new(RUN_MANIFEST) {
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{}", rel.display());
        }
    }
    let rm: RunManifest = serde_json::from_str(&fs::read_to_string(a.join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(rm.command, "synth-data");
    assert_eq!(rm.seed, Some(9));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("x"));
    assert_eq!(pcir(&["synth-data", "--n", "0", "--out", &out]), 1);
    assert_eq!(pcir(&["verify", "--suite", "everything"]), 1);
    assert_eq!(pcir(&["train", "--data", &out, "--out", &out, "--set", "lr=-1"]), 1);
    assert!(Cli::try_parse_from(["pcir", "synth-data", "--n", "many"]).is_err());
    assert!(Cli::try_parse_from(["pcir", "fly"]).is_err());
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = s(&dir.path().join("nowhere"));
    assert_eq!(pcir(&["make-queries", "--data", &nowhere, "--out", &nowhere]), 2);
}

#[test]
fn preview_writes_views_and_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("preview");
    assert_eq!(pcir(&["synth-data", "--n", "3", "--out", &s(&data)]), 0);
    assert_eq!(pcir(&["preview", "--data", &s(&data), "--out", &s(&out), "--count", "2"]), 0);
    let lines = fs::read_to_string(out.join("triplets.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let pngs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!(pngs >= 4, "{pngs} images");
}

#[test]
fn train_resume_embed_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| s(&dir.path().join(x));
    let (data, straight, split) = (p("data"), p("straight"), p("split"));
    let (gallery, queries_dir) = (p("gallery.safetensors"), p("queries"));
    let small = ["--set", "batch_size=4", "--set", "predictor_width=16", "--set", "warmup_steps=2"];
    let train = |out: &str, steps: &str, resume: Option<&str>| {
        let mut args = vec!["train", "--data", &data, "--out", out, "--set", steps];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        args.extend(small);
        pcir(&args)
    };
    assert_eq!(pcir(&["synth-data", "--n", "8", "--seed", "1", "--out", &data]), 0);

    assert_eq!(train(&straight, "max_steps=6", None), 0);
    assert_eq!(train(&split, "max_steps=3", None), 0);
    let split_ckpt = s(&dir.path().join("split").join(FINAL_CHECKPOINT));
    assert_eq!(train(&split, "max_steps=6", Some(&split_ckpt)), 0);
    assert_eq!(metrics(&dir.path().join("split")), metrics(&dir.path().join("straight")));

    let ckpt = s(&dir.path().join("straight").join(FINAL_CHECKPOINT));
    assert_eq!(pcir(&["embed-gallery", "--checkpoint", &ckpt, "--data", &data, "--out", &gallery]), 0);
    assert_eq!(pcir(&["make-queries", "--data", &data, "--out", &queries_dir]), 0);
    let queries = s(&dir.path().join("queries").join("queries.jsonl"));
    let eval = |k: &str, out: &str| {
        pcir(&[
            "evaluate", "--checkpoint", &ckpt, "--queries", &queries, "--gallery", &gallery, "--k", k, "--out", out,
        ])
    };
    assert_eq!(eval("5,1,5", &p("report")), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report/report.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("\"1\"") && text.contains("\"5\""), "{text}");
    assert!(fs::read_to_string(dir.path().join("report/report.txt")).unwrap().contains("R@K"));
    assert_eq!(eval("0", &p("bad")), 1);
}
