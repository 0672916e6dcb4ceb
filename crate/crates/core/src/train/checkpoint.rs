//! Checkpoint archives: parameters, optimizer moments, configuration and
//! progress in one file.

use std::path::Path;

use crate::autograd::Matrix;
use crate::archive::{read_archive, write_archive, Archive};
use crate::error::{Error, Result};
use crate::model::PredictiveMapper;
use crate::train::config::TrainConfig;
use crate::train::optimizer::{AdamW, AdamWConfig};

const FORMAT: &str = "pcir-checkpoint";
const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Everything needed to continue a run or to evaluate the mapper.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub mapper: PredictiveMapper,
    pub optimizer: AdamW,
    /// Completed optimization steps.
    pub step: u64,
    pub encoder_checksum: String,
    pub data_checksum: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut archive = Archive::default();
        for (name, entry) in self.mapper.params.iter() {
            archive.arrays.insert(format!("{PARAM}{name}"), entry.value.clone());
        }
        for (name, m) in &self.optimizer.m {
            archive.arrays.insert(format!("{MOMENT1}{name}"), m.clone());
        }
        for (name, v) in &self.optimizer.v {
            archive.arrays.insert(format!("{MOMENT2}{name}"), v.clone());
        }
        let meta = &mut archive.metadata;
        meta.insert("format".into(), FORMAT.into());
        meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        meta.insert("config".into(), self.config.to_flat_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("optimizer_t".into(), self.optimizer.t.to_string());
        // Every random draw is derived from (seed, step, item), so the seed
        // and the step fully describe the generator state.
        meta.insert("rng".into(), format!("chacha8:seed={}", self.config.seed));
        meta.insert("encoder_checksum".into(), self.encoder_checksum.clone());
        meta.insert("data_checksum".into(), self.data_checksum.clone());
        write_archive(path, &archive)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        if archive.meta("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a training checkpoint", path.display())));
        }
        let config = TrainConfig::parse(archive.meta("config")?)?;
        let parse_u64 = |key: &str| -> Result<u64> {
            archive
                .meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not an integer")))
        };
        let step = parse_u64("step")?;
        let mut mapper = PredictiveMapper::new(config.model()?, config.seed)?;
        let mut optimizer = AdamW::new(adam_config(&config), &mapper.params);
        optimizer.t = parse_u64("optimizer_t")?;
        let names: Vec<String> = mapper.params.names().map(String::from).collect();
        for name in &names {
            let slot = mapper.params.get_mut(name).expect("listed name");
            slot.assign(fetch(&archive, PARAM, name, slot.dim())?);
            let dim = slot.dim();
            optimizer.m[name.as_str()].assign(fetch(&archive, MOMENT1, name, dim)?);
            optimizer.v[name.as_str()].assign(fetch(&archive, MOMENT2, name, dim)?);
        }
        let expected = names.len() * 3;
        if archive.arrays.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} holds {} arrays, expected {expected}",
                path.display(),
                archive.arrays.len()
            )));
        }
        Ok(Self {
            config,
            mapper,
            optimizer,
            step,
            encoder_checksum: archive.meta("encoder_checksum")?.to_string(),
            data_checksum: archive.meta("data_checksum")?.to_string(),
        })
    }
}

fn fetch<'a>(archive: &'a Archive, prefix: &str, name: &str, dim: (usize, usize)) -> Result<&'a Matrix> {
    let stored = archive.array(&format!("{prefix}{name}"))?;
    if stored.dim() != dim {
        return Err(Error::shape(
            "checkpoint array",
            format!("{prefix}{name} {dim:?}"),
            format!("{:?}", stored.dim()),
        ));
    }
    Ok(stored)
}

pub(crate) fn adam_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    }
}
