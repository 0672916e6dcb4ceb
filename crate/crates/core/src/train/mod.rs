//! Training loop: deterministic batching and view sampling, AdamW updates,
//! checkpointing and the metrics log.

pub mod checkpoint;
pub mod config;
pub mod optimizer;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ActionEmbedding, FrozenDualEncoder, ToyDualEncoder, VisualFeatures};
use crate::error::{Error, Result};
use crate::model::{evaluate_batch, EncodedTriplet, PredictiveMapper};
use crate::retrieval::{composite_queries, evaluate, EvalReport, Gallery, Similarity};
use crate::view_forge::{make_triplet, sample_mask_block, synth_dataset, RawPair, SynthConfig};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optimizer::{AdamW, AdamWConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

/// Random stream for one `(domain, a, b)` coordinate of a seeded run.
pub fn stream(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Frozen encoder matching a profile name.
pub fn build_encoder(config: &TrainConfig) -> Result<Arc<dyn FrozenDualEncoder>> {
    Ok(Arc::new(ToyDualEncoder::new(config.encoder_profile()?)?))
}

/// SHA-256 over ids, captions and pixels.
pub fn data_checksum(pairs: &[RawPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id.as_bytes());
        h.update([0]);
        h.update(p.caption.as_bytes());
        h.update([0]);
        h.update(p.image.width().to_le_bytes());
        h.update(p.image.height().to_le_bytes());
        for v in p.image.as_raw() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_pred")]
    pub prediction: f64,
    #[serde(rename = "L_align")]
    pub alignment: f64,
    #[serde(rename = "L")]
    pub total: f64,
    pub gate_value: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    config: TrainConfig,
    mapper: PredictiveMapper,
    optimizer: AdamW,
    step: u64,
    encoder: Arc<dyn FrozenDualEncoder>,
    pairs: Vec<RawPair>,
    targets: Vec<VisualFeatures>,
    actions: Vec<ActionEmbedding>,
    encoder_checksum: String,
    data_checksum: String,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("pairs", &self.pairs.len())
            .field("encoder", &self.encoder.profile().name)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, encoder: Arc<dyn FrozenDualEncoder>, pairs: Vec<RawPair>) -> Result<Self> {
        config.validate()?;
        let mapper = PredictiveMapper::new(config.model()?, config.seed)?;
        let optimizer = AdamW::new(checkpoint::adam_config(&config), &mapper.params);
        Self::assemble(config, mapper, optimizer, 0, encoder, pairs)
    }

    /// Continues from a checkpoint. The encoder and the data must be the
    /// ones the checkpoint was trained with.
    pub fn resume(ckpt: Checkpoint, encoder: Arc<dyn FrozenDualEncoder>, pairs: Vec<RawPair>) -> Result<Self> {
        if encoder.checksum() != ckpt.encoder_checksum {
            return Err(Error::Checkpoint("frozen encoder differs from the one used for training".into()));
        }
        if data_checksum(&pairs) != ckpt.data_checksum {
            return Err(Error::Checkpoint("training data differs from the checkpointed run".into()));
        }
        Self::assemble(ckpt.config, ckpt.mapper, ckpt.optimizer, ckpt.step, encoder, pairs)
    }

    fn assemble(
        config: TrainConfig,
        mapper: PredictiveMapper,
        optimizer: AdamW,
        step: u64,
        encoder: Arc<dyn FrozenDualEncoder>,
        pairs: Vec<RawPair>,
    ) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "training needs at least 2 pairs, got {}",
                pairs.len()
            )));
        }
        if encoder.profile().feature_dim != mapper.feature_dim() || encoder.profile().grid != mapper.config.predictor.grid {
            return Err(Error::InvalidInput("encoder profile does not match the model dimensions".into()));
        }
        for p in &pairs {
            p.validate()?;
        }
        let targets = pairs
            .par_iter()
            .map(|p| encoder.encode_image_any(&p.image))
            .collect::<Result<Vec<_>>>()?;
        let actions = pairs
            .par_iter()
            .map(|p| encoder.encode_text(&p.caption).map(|t| t.cls))
            .collect::<Result<Vec<_>>>()?;
        let encoder_checksum = encoder.checksum();
        let data_checksum = data_checksum(&pairs);
        Ok(Self {
            config,
            mapper,
            optimizer,
            step,
            encoder,
            pairs,
            targets,
            actions,
            encoder_checksum,
            data_checksum,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mapper(&self) -> &PredictiveMapper {
        &self.mapper
    }

    pub fn encoder(&self) -> &Arc<dyn FrozenDualEncoder> {
        &self.encoder
    }

    pub fn pairs(&self) -> &[RawPair] {
        &self.pairs
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size.min(self.pairs.len())
    }

    /// Pair indices of the batch used at `step`. Each epoch is a fresh
    /// permutation; a trailing partial batch is dropped.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.pairs.len();
        let b = self.batch_size();
        let per_epoch = (n / b) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(self.config.seed, "epoch", epoch, 0));
        perm[k * b..(k + 1) * b].to_vec()
    }

    /// Views, encodings and mask blocks for the batch at `step`.
    pub fn prepare_batch(&self, step: u64) -> Result<Vec<EncodedTriplet>> {
        let view = self.config.view();
        let grid = self.encoder.profile().grid;
        self.batch_indices(step)
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = stream(self.config.seed, "view", step, slot as u64);
                let triplet = make_triplet(&self.pairs[i], &view, &mut rng)?;
                let block = sample_mask_block(grid, &view.crop, view.predict_entire, &mut rng)?;
                Ok(EncodedTriplet {
                    id: triplet.id,
                    action: self.actions[i].clone(),
                    source: self.encoder.encode_image_any(&triplet.source_image)?,
                    target: self.targets[i].clone(),
                    block,
                })
            })
            .collect()
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let items = self.prepare_batch(self.step)?;
        let ids = || items.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        let non_finite = |step| Error::NonFiniteLoss { step, ids: ids() };
        let eval = match evaluate_batch(&self.mapper, self.encoder.as_ref(), &items, true) {
            Err(Error::NonFinite { .. }) => return Err(non_finite(self.step + 1)),
            other => other?,
        };
        let mut grads = eval.grads;
        let grad_norm = optimizer::global_norm(&grads);
        if !eval.total.is_finite() || !grad_norm.is_finite() {
            return Err(non_finite(self.step + 1));
        }
        if self.config.grad_clip > 0.0 {
            optimizer::clip_global_norm(&mut grads, self.config.grad_clip);
        }
        let lr = self.config.lr_at(self.step + 1);
        self.optimizer.step(&mut self.mapper.params, &grads, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            prediction: eval.prediction,
            alignment: eval.alignment,
            total: eval.total,
            gate_value: self.mapper.gate_value(),
            lr,
            grad_norm,
        })
    }

    /// Fails if the frozen encoder's weights changed since construction.
    pub fn verify_encoder(&self) -> Result<()> {
        if self.encoder.checksum() != self.encoder_checksum {
            return Err(Error::Checkpoint("frozen encoder weights changed during training".into()));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            mapper: self.mapper.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            encoder_checksum: self.encoder_checksum.clone(),
            data_checksum: self.data_checksum.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.verify_encoder()?;
        self.checkpoint().save(path)
    }
}

/// Inputs to a full training run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub first: Option<StepMetrics>,
    pub last: Option<StepMetrics>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.safetensors"))
}

/// Trains to `max_steps`, writing the metrics log, periodic checkpoints and
/// the final checkpoint under `out_dir`. With `resume`, continues from that
/// checkpoint and drops log lines past its step.
pub fn run_training(
    opts: &RunOptions,
    encoder: Arc<dyn FrozenDualEncoder>,
    pairs: Vec<RawPair>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut ckpt_config = ckpt.config.clone();
            ckpt_config.max_steps = opts.config.max_steps;
            ckpt_config.checkpoint_every = opts.config.checkpoint_every;
            let mut t = Trainer::resume(ckpt, encoder, pairs)?;
            t.config = ckpt_config;
            truncate_log(&metrics_path, t.step())?;
            t
        }
        None => {
            fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
            Trainer::new(opts.config.clone(), encoder, pairs)?
        }
    };
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let (mut first, mut last) = (None, None);
    while trainer.step() < trainer.config.max_steps {
        let m = trainer.train_step()?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&m);
        let every = trainer.config.checkpoint_every;
        if every > 0 && m.step % every == 0 && m.step < trainer.config.max_steps {
            trainer.save_checkpoint(&checkpoint_path(&opts.out_dir, m.step))?;
        }
        if first.is_none() {
            first = Some(m.clone());
        }
        last = Some(m);
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = opts.out_dir.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_checkpoint)?;
    Ok(RunSummary {
        final_step: trainer.step(),
        final_checkpoint,
        metrics: metrics_path,
        first,
        last,
    })
}

fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let kept = match fs::File::open(path) {
        Ok(f) => {
            let mut kept = String::new();
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: StepMetrics = serde_json::from_str(&line).map_err(|source| Error::Json {
                    path: path.to_path_buf(),
                    line: n + 1,
                    source,
                })?;
                if m.step <= step {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
            kept
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    crate::view_forge::read_jsonl(path)
}

/// Outcome of [`overfit_run`].
#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    /// `L_pred` of the first batch before any update.
    pub initial_prediction: f64,
    /// `L_pred` of the same batch (same views and blocks) after training.
    pub final_prediction: f64,
    pub report: EvalReport,
    pub metrics: Vec<StepMetrics>,
    pub elapsed: std::time::Duration,
}

impl OverfitOutcome {
    pub fn prediction_ratio(&self) -> f64 {
        self.final_prediction / self.initial_prediction
    }

    pub fn recall_at_1(&self) -> f64 {
        self.report.recall_at(1).unwrap_or(0.0)
    }
}

/// Trains `config` on `n` synthetic pairs drawn with the config seed, then
/// evaluates R@1 and R@5 on the pairs' training composites.
pub fn overfit_run(config: &TrainConfig, n: usize) -> Result<OverfitOutcome> {
    let start = std::time::Instant::now();
    let pairs = synth_dataset(n, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(config.seed));
    let encoder = build_encoder(config)?;
    let mut trainer = Trainer::new(config.clone(), encoder.clone(), pairs.clone())?;
    let mut metrics = Vec::with_capacity(config.max_steps as usize);
    while trainer.step() < config.max_steps {
        metrics.push(trainer.train_step()?);
    }
    let first = trainer.prepare_batch(0)?;
    let final_prediction = evaluate_batch(trainer.mapper(), encoder.as_ref(), &first, false)?.prediction;
    let gallery = Gallery::from_pairs(encoder.as_ref(), &pairs)?;
    let queries = composite_queries(&pairs, &config.view().crop, config.seed)?;
    let report = evaluate(trainer.mapper(), encoder.as_ref(), &queries, &gallery, &[1, 5], Similarity::Cosine)?;
    Ok(OverfitOutcome {
        initial_prediction: metrics.first().map_or(f64::NAN, |m| m.prediction),
        final_prediction,
        report,
        metrics,
        elapsed: start.elapsed(),
    })
}
