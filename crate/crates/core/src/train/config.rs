//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{FusionConfig, FusionOrder, GateMode};
use crate::encoder::EncoderProfile;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::predictor::{PredictorConfig, ResidualWiring};
use crate::view_forge::{CropConfig, MaskBlock, SourceMode, ViewConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: String,
    pub encoder_seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub predictor_width: usize,
    pub predictor_depth: usize,
    pub predictor_heads: usize,
    pub predictor_mlp_ratio: usize,
    pub tau: f64,
    pub no_crop: bool,
    pub no_action: bool,
    pub no_gate: bool,
    pub mask_source: bool,
    pub predict_entire: bool,
    pub average_then_map: bool,
    pub standard_residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "preset",
    "encoder",
    "encoder_seed",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "warmup_steps",
    "batch_size",
    "max_steps",
    "seed",
    "checkpoint_every",
    "grad_clip",
    "crop_scale_min",
    "crop_scale_max",
    "crop_aspect_min",
    "crop_aspect_max",
    "predictor_width",
    "predictor_depth",
    "predictor_heads",
    "predictor_mlp_ratio",
    "tau",
    "no_crop",
    "no_action",
    "no_gate",
    "mask_source",
    "predict_entire",
    "average_then_map",
    "standard_residual",
];

impl TrainConfig {
    /// Full-scale hyper-parameters: AdamW at 1e-5 with weight decay 0.1,
    /// 10k warmup steps, batch 1024, 12 × 384 predictor.
    pub fn full_scale() -> Self {
        Self {
            encoder: "vit-l-14".into(),
            encoder_seed: 0,
            lr: 1e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 10_000,
            batch_size: 1024,
            max_steps: 100_000,
            seed: 0,
            checkpoint_every: 10_000,
            grad_clip: 0.0,
            crop_scale_min: 0.2,
            crop_scale_max: 0.25,
            crop_aspect_min: 0.75,
            crop_aspect_max: 1.5,
            predictor_width: 384,
            predictor_depth: 12,
            predictor_heads: 8,
            predictor_mlp_ratio: 4,
            tau: 100.0,
            no_crop: false,
            no_action: false,
            no_gate: false,
            mask_source: false,
            predict_entire: false,
            average_then_map: false,
            standard_residual: false,
        }
    }

    /// Desk-scale settings for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            encoder: "toy".into(),
            lr: 1e-2,
            warmup_steps: 100,
            batch_size: 32,
            max_steps: 300,
            checkpoint_every: 100,
            predictor_width: 64,
            predictor_depth: 2,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::ConfigValue {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be >= 2");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", "must be >= 0");
        }
        if self.no_crop && self.mask_source {
            return bad("mask_source", "cannot be combined with no_crop");
        }
        self.view().crop.validate()?;
        self.encoder_profile()?;
        self.model()?.validate()
    }

    pub fn encoder_profile(&self) -> Result<EncoderProfile> {
        EncoderProfile::by_name(&self.encoder, self.encoder_seed)
    }

    pub fn view(&self) -> ViewConfig {
        ViewConfig {
            crop: CropConfig {
                scale: (self.crop_scale_min, self.crop_scale_max),
                aspect: (self.crop_aspect_min, self.crop_aspect_max),
            },
            source: if self.no_crop {
                SourceMode::Identity
            } else if self.mask_source {
                SourceMode::Mask
            } else {
                SourceMode::Crop
            },
            predict_entire: self.predict_entire,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let profile = self.encoder_profile()?;
        let predictor = PredictorConfig {
            feature_dim: profile.feature_dim,
            width: self.predictor_width,
            depth: self.predictor_depth,
            heads: self.predictor_heads,
            mlp_ratio: self.predictor_mlp_ratio,
            grid: profile.grid,
            residual: if self.standard_residual {
                ResidualWiring::Standard
            } else {
                ResidualWiring::Literal
            },
            zero_action: self.no_action,
        };
        Ok(ModelConfig {
            predictor,
            fusion: FusionConfig {
                feature_dim: profile.feature_dim,
                width: self.predictor_width,
                gate: if self.no_gate { GateMode::Ungated } else { GateMode::Tanh },
                order: if self.average_then_map {
                    FusionOrder::AverageThenMap
                } else {
                    FusionOrder::MapThenAverage
                },
            },
            tau: self.tau,
            query_block: MaskBlock::centered(
                profile.grid,
                (self.crop_scale_min + self.crop_scale_max) / 2.0,
                (self.crop_aspect_min * self.crop_aspect_max).sqrt(),
                self.predict_entire,
            ),
        })
    }

    /// Effective learning rate: linear warmup from 0, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &toml::Value) -> Result<()> {
        use toml::Value as V;
        let mismatch = |expected: &str| Error::ConfigValue {
            key: key.into(),
            message: format!("expected {expected}, got `{value}`"),
        };
        let float = || match value {
            V::Float(f) => Ok(*f),
            V::Integer(i) => Ok(*i as f64),
            _ => Err(mismatch("a number")),
        };
        let uint = || match value {
            V::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(mismatch("a non-negative integer")),
        };
        let boolean = || match value {
            V::Boolean(b) => Ok(*b),
            _ => Err(mismatch("true or false")),
        };
        let string = || match value {
            V::String(s) => Ok(s.clone()),
            _ => Err(mismatch("a string")),
        };
        match key {
            "preset" => {
                *self = match string()?.as_str() {
                    "full_scale" => Self::full_scale(),
                    "toy" => Self::toy(),
                    other => {
                        return Err(Error::ConfigValue {
                            key: key.into(),
                            message: format!("unknown preset `{other}` (full_scale, toy)"),
                        })
                    }
                }
            }
            "encoder" => self.encoder = string()?,
            "encoder_seed" => self.encoder_seed = uint()?,
            "lr" => self.lr = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "eps" => self.eps = float()?,
            "warmup_steps" => self.warmup_steps = uint()?,
            "batch_size" => self.batch_size = uint()? as usize,
            "max_steps" => self.max_steps = uint()?,
            "seed" => self.seed = uint()?,
            "checkpoint_every" => self.checkpoint_every = uint()?,
            "grad_clip" => self.grad_clip = float()?,
            "crop_scale_min" => self.crop_scale_min = float()?,
            "crop_scale_max" => self.crop_scale_max = float()?,
            "crop_aspect_min" => self.crop_aspect_min = float()?,
            "crop_aspect_max" => self.crop_aspect_max = float()?,
            "predictor_width" => self.predictor_width = uint()? as usize,
            "predictor_depth" => self.predictor_depth = uint()? as usize,
            "predictor_heads" => self.predictor_heads = uint()? as usize,
            "predictor_mlp_ratio" => self.predictor_mlp_ratio = uint()? as usize,
            "tau" => self.tau = float()?,
            "no_crop" => self.no_crop = boolean()?,
            "no_action" => self.no_action = boolean()?,
            "no_gate" => self.no_gate = boolean()?,
            "mask_source" => self.mask_source = boolean()?,
            "predict_entire" => self.predict_entire = boolean()?,
            "average_then_map" => self.average_then_map = boolean()?,
            "standard_residual" => self.standard_residual = boolean()?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Parses flat `key = value` text on top of the full-scale defaults. A
    /// `preset` line, wherever it appears, is applied before other keys.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigValue {
            key: "<file>".into(),
            message: e.message().to_string(),
        })?;
        let mut cfg = Self::full_scale();
        if let Some(preset) = table.get("preset") {
            cfg.set("preset", preset)?;
        }
        for (key, value) in &table {
            if key == "preset" {
                continue;
            }
            if value.is_table() || value.is_array() {
                return Err(Error::ConfigValue {
                    key: key.clone(),
                    message: "nested values are not allowed in the flat format".into(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidInput(format!("override `{assignment}` is not of the form key=value"))
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(unknown_key(key));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set(key, &value)
    }

    /// Renders every key (except `preset`) in the flat format.
    pub fn to_flat_string(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in KEYS.iter().filter(|k| **k != "preset") {
            let v = &json[*key];
            let rendered = match v {
                serde_json::Value::String(s) => format!("\"{s}\""),
                serde_json::Value::Number(n) if n.is_f64() => {
                    let f = n.as_f64().expect("f64");
                    if f.fract() == 0.0 && f.abs() < 1e15 {
                        format!("{f:.1}")
                    } else {
                        format!("{f:e}")
                    }
                }
                other => other.to_string(),
            };
            writeln!(out, "{key} = {rendered}").expect("string write");
        }
        out
    }
}

fn unknown_key(key: &str) -> Error {
    let suggestion = KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= key.len().max(3) / 2 + 1)
        .map(|(_, k)| k.to_string());
    Error::UnknownConfigKey {
        key: key.into(),
        suggestion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let c = TrainConfig::full_scale();
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!(c.warmup_steps, 10_000);
        assert_eq!(c.batch_size, 1024);
        assert_eq!((c.predictor_depth, c.predictor_width), (12, 384));
        c.validate().unwrap();
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            lr: 1e-5,
            warmup_steps: 100,
            ..TrainConfig::toy()
        };
        assert_eq!(c.lr_at(0), 0.0);
        assert!((c.lr_at(50) - 5e-6).abs() < 1e-20);
        assert_eq!(c.lr_at(100), 1e-5);
        assert_eq!(c.lr_at(5000), 1e-5);
    }

    #[test]
    fn parse_with_preset_and_flags() {
        let c = TrainConfig::parse("max_steps = 20\npreset = \"toy\"\nno_gate = true\nlr = 1e-3\n").unwrap();
        assert_eq!(c.max_steps, 20);
        assert_eq!(c.batch_size, 32);
        assert!(c.no_gate);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = TrainConfig::parse("preset = \"toy\"\nwarmup_step = 3").unwrap_err();
        assert_eq!(err.to_string(), "unknown config key `warmup_step` (did you mean `warmup_steps`?)");
        let err = TrainConfig::parse("no_gat = true").unwrap_err();
        assert!(err.to_string().contains("`no_gate`"));
    }

    #[test]
    fn wrong_types_are_reported() {
        let err = TrainConfig::parse("lr = \"fast\"").unwrap_err();
        assert!(matches!(err, Error::ConfigValue { ref key, .. } if key == "lr"));
        assert!(TrainConfig::parse("batch_size = 1").is_err());
    }

    #[test]
    fn flat_rendering_round_trips() {
        let mut c = TrainConfig::toy();
        c.no_action = true;
        c.lr = 3.5e-4;
        c.seed = 9;
        let back = TrainConfig::parse(&c.to_flat_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::toy();
        c.apply_override("max_steps=7").unwrap();
        c.apply_override("no_crop = true").unwrap();
        c.apply_override("encoder=toy").unwrap();
        assert_eq!(c.max_steps, 7);
        assert!(c.no_crop);
        assert!(c.apply_override("lrr=1").is_err());
        assert!(c.apply_override("nonsense").is_err());
    }
}
