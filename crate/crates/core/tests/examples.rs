//! Runs the quick examples from the binaries `cargo test` builds beside the
//! test executables.

use std::path::PathBuf;
use std::process::Command;

fn example(name: &str) -> PathBuf {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let bin = deps.parent().unwrap().join("examples").join(name);
    bin.with_extension(std::env::consts::EXE_EXTENSION)
}

fn run(name: &str, args: &[&str]) -> String {
    let bin = example(name);
    assert!(bin.exists(), "{} not built", bin.display());
    let out = Command::new(&bin).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{name} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn data_and_view_examples() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run("synth_data", &["6", dir.path().to_str().unwrap()]).contains("6 pairs round-tripped"));
    assert!(run("crop_views", &[]).contains("mask blocks"));
}

#[test]
fn model_examples() {
    assert!(run("encode_features", &[]).contains("d = 32"));
    assert!(run("predictor_forward", &[]).contains("predicted_patches"));
    assert!(run("fuse_pseudo_token", &[]).contains("changes S*: false"));
}

#[test]
fn gradient_check_example() {
    assert!(run("gradient_check", &[]).contains("max"));
}

#[test]
fn short_training_examples() {
    assert!(run("retrieve", &["20"]).contains("R@K"));
    assert!(run("cli_tour", &[]).contains("exit 0"));
}
