//! Drives every `pcir` subcommand in-process on a throwaway directory.
//!
//! `cargo run --example cli_tour`

use clap::Parser;
use predictive_cir::console::{run, Cli};

fn main() {
    let dir = std::env::temp_dir().join("pcir-cli-tour");
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let (data, run_dir, ckpt, gallery, queries) = (
        d("data"),
        d("run"),
        d("run/final.safetensors"),
        d("gallery.safetensors"),
        d("queries"),
    );
    let query_file = d("queries/queries.jsonl");
    let preview = d("preview");
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth-data", "--n", "16", "--seed", "7", "--out", &data],
        vec!["preview", "--data", &data, "--out", &preview, "--count", "2"],
        vec!["train", "--data", &data, "--out", &run_dir, "--set", "max_steps=40", "--set", "batch_size=8"],
        vec!["embed-gallery", "--checkpoint", &ckpt, "--data", &data, "--out", &gallery],
        vec!["make-queries", "--data", &data, "--out", &queries],
        vec!["evaluate", "--checkpoint", &ckpt, "--queries", &query_file, "--gallery", &gallery, "--k", "10,1,5"],
        vec!["verify", "--suite", "oracle"],
    ];
    for args in steps {
        println!("$ pcir {}", args.join(" "));
        let cli = Cli::try_parse_from(std::iter::once("pcir").chain(args)).expect("valid command line");
        let code = run(cli);
        println!("exit {code}\n");
        assert_eq!(code, 0);
    }
}
