//! Command-line front end. The `pcir` binary is a thin wrapper over [`main`].

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::retrieval::{
    composite_queries, evaluate, load_queries, normalize_ks, write_queries, Gallery, Similarity,
};
use crate::train::{build_encoder, run_training, stream, Checkpoint, RunOptions, TrainConfig};
use crate::verify::{run_suite, Suite};
use crate::view_forge::{
    load_pairs, make_triplet, save_raster, synth_dataset, write_dataset, CropConfig, SynthConfig, MANIFEST_FILE,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "pcir", version, about = "Prediction-based composed image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image-caption corpus.
    SynthData(SynthArgs),
    /// Write source/target views for a few pairs.
    Preview(PreviewArgs),
    /// Train the mapper.
    Train(TrainArgs),
    /// Embed gallery images with the frozen image encoder.
    EmbedGallery(EmbedArgs),
    /// Build crop-plus-caption queries for every pair of a dataset.
    MakeQueries(QueryArgs),
    /// Retrieve and score queries against a gallery.
    Evaluate(EvalArgs),
    /// Run the gradient, oracle and invariant self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value = "data/synth")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; the toy preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Checkpoint whose encoder embeds the gallery.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `queries.jsonl`
    #[arg(long)]
    pub queries: PathBuf,
    /// Gallery cache written by `embed-gallery`.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
    /// Report directory; defaults to the queries' directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "cosine")]
    pub similarity: String,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Written beside the outputs of every artifact-producing command.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub out_dir: PathBuf,
    pub args: Vec<String>,
}

pub fn version_string() -> String {
    option_env!("PCIR_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Recorder {
    command: &'static str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    started_at: String,
}

impl Recorder {
    fn new(command: &'static str, config: Option<PathBuf>, seed: Option<u64>) -> Self {
        Self {
            command,
            config,
            seed,
            started_at: now(),
        }
    }

    fn finish(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            version: version_string(),
            started_at: self.started_at,
            finished_at: now(),
            out_dir: out_dir.to_path_buf(),
            args: std::env::args().skip(1).collect(),
        };
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// A dataset directory or a manifest path.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::InvalidInput("--workers must be >= 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn synth_data(args: &SynthArgs) -> Result<PathBuf> {
    if args.n == 0 {
        return Err(Error::InvalidInput("--n must be >= 1".into()));
    }
    let rec = Recorder::new("synth-data", None, Some(args.seed));
    let cfg = SynthConfig { size: args.size };
    let pairs = synth_dataset(args.n, &cfg, &mut ChaCha8Rng::seed_from_u64(args.seed));
    let manifest = write_dataset(&args.out, &pairs)?;
    rec.finish(&args.out)?;
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct PreviewEntry {
    id: String,
    action: String,
    source: String,
    target: String,
    crop: crate::view_forge::CropSpec,
}

pub fn preview(args: &PreviewArgs) -> Result<PathBuf> {
    let rec = Recorder::new("preview", None, Some(args.seed));
    let pairs = load_pairs(&manifest_path(&args.data))?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut lines = String::new();
    for (i, pair) in pairs.iter().take(args.count).enumerate() {
        let t = make_triplet(pair, &Default::default(), &mut stream(args.seed, "preview", i as u64, 0))?;
        let source = format!("{}-source.png", t.id);
        let target = format!("{}-target.png", t.id);
        save_raster(&t.source_image, &args.out.join(&source))?;
        save_raster(&t.target_image, &args.out.join(&target))?;
        let entry = PreviewEntry {
            id: t.id,
            action: t.action_text,
            source,
            target,
            crop: t.crop_spec,
        };
        lines.push_str(&serde_json::to_string(&entry).expect("preview serializes"));
        lines.push('\n');
    }
    let path = args.out.join("triplets.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    rec.finish(&args.out)?;
    Ok(path)
}

/// Config file (or toy preset), then `--set` overrides, then `--seed`.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::toy(),
    };
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> Result<crate::train::RunSummary> {
    set_workers(args.workers)?;
    let config = resolve_train_config(args)?;
    let rec = Recorder::new("train", args.config.clone(), Some(config.seed));
    let pairs = load_pairs(&manifest_path(&args.data))?;
    let encoder = match &args.resume {
        Some(path) => build_encoder(&Checkpoint::load(path)?.config)?,
        None => build_encoder(&config)?,
    };
    let opts = RunOptions {
        config: config.clone(),
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
    };
    let every = (config.max_steps / 10).max(1);
    let summary = run_training(&opts, encoder, pairs, |m| {
        if m.step == 1 || m.step % every == 0 {
            println!(
                "step {:>6}  L_pred {:.5}  L_align {:.4}  L {:.4}  lr {:.2e}  gate {:+.4}",
                m.step, m.prediction, m.alignment, m.total, m.lr, m.gate_value
            );
        }
    })?;
    if let Some(last) = &summary.last {
        println!(
            "final step {}: L_pred {:.5}  L_align {:.4}  L {:.4}",
            last.step, last.prediction, last.alignment, last.total
        );
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    rec.finish(&args.out)?;
    Ok(summary)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn embed_gallery(args: &EmbedArgs) -> Result<Gallery> {
    set_workers(args.workers)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let rec = Recorder::new("embed-gallery", None, Some(ckpt.config.seed));
    let encoder = build_encoder(&ckpt.config)?;
    let gallery = Gallery::from_manifest(encoder.as_ref(), &manifest_path(&args.data))?;
    gallery.save(&args.out, &encoder.checksum())?;
    println!("{} items, d = {} -> {}", gallery.len(), gallery.dim(), args.out.display());
    rec.finish(&parent_dir(&args.out))?;
    Ok(gallery)
}

pub fn make_queries(args: &QueryArgs) -> Result<PathBuf> {
    let rec = Recorder::new("make-queries", None, Some(args.seed));
    let pairs = load_pairs(&manifest_path(&args.data))?;
    let queries = composite_queries(&pairs, &CropConfig::default(), args.seed)?;
    let path = write_queries(&args.out, &queries)?;
    println!("{} queries -> {}", queries.len(), path.display());
    rec.finish(&args.out)?;
    Ok(path)
}

fn parse_similarity(s: &str) -> Result<Similarity> {
    match s {
        "cosine" => Ok(Similarity::Cosine),
        "dot" => Ok(Similarity::Dot),
        other => Err(Error::InvalidInput(format!("unknown similarity `{other}` (cosine, dot)"))),
    }
}

pub fn evaluate_cmd(args: &EvalArgs) -> Result<crate::retrieval::EvalReport> {
    set_workers(args.workers)?;
    let ks = normalize_ks(&args.k)?;
    let similarity = parse_similarity(&args.similarity)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let rec = Recorder::new("evaluate", None, Some(ckpt.config.seed));
    let encoder = build_encoder(&ckpt.config)?;
    let (gallery, checksum) = Gallery::load(&args.gallery)?;
    if checksum != encoder.checksum() {
        return Err(Error::InvalidInput(format!(
            "gallery {} was embedded with a different encoder than the checkpoint",
            args.gallery.display()
        )));
    }
    if gallery.dim() != ckpt.mapper.feature_dim() {
        return Err(Error::shape("evaluate gallery", ckpt.mapper.feature_dim(), gallery.dim()));
    }
    let queries = load_queries(&args.queries)?;
    let report = evaluate(&ckpt.mapper, encoder.as_ref(), &queries, &gallery, &ks, similarity)?;
    let out = args.out.clone().unwrap_or_else(|| parent_dir(&args.queries));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let json = out.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(|e| Error::io(&json, e))?;
    let table = report.to_table();
    let txt = out.join("report.txt");
    fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    print!("{table}");
    rec.finish(&out)?;
    Ok(report)
}

/// Returns whether every check passed.
pub fn verify(args: &VerifyArgs) -> Result<bool> {
    let suite: Suite = args.suite.parse()?;
    let checks = run_suite(suite, args.seed)?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::SynthData(a) => synth_data(a).map(|p| {
            println!("wrote {}", p.display());
            true
        }),
        Command::Preview(a) => preview(a).map(|p| {
            println!("wrote {}", p.display());
            true
        }),
        Command::Train(a) => train(a).map(|_| true),
        Command::EmbedGallery(a) => embed_gallery(a).map(|_| true),
        Command::MakeQueries(a) => make_queries(a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| true),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: verification failed");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Parses `std::env::args` and runs. Usage errors exit with 1.
pub fn main() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
