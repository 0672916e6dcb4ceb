//! Query composition, gallery embedding, ranking and evaluation.

pub mod metrics;
pub mod template;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, Archive};
use crate::autograd::Matrix;
use crate::encoder::{ActionEmbedding, FrozenDualEncoder, PromptSequence, PseudoToken};
use crate::error::{Error, Result};
use crate::model::PredictiveMapper;
use crate::train::stream;
use crate::view_forge::{load_raster, resolve, sample_crop_spec, save_raster, CropConfig, RawPair, Raster};

pub use metrics::{check_truths, map_at_k, rank, recall_at_k, RankedRetrieval, Similarity};
pub use template::{Template, TemplateKind};

const GALLERY_FORMAT: &str = "pcir-gallery";
const GALLERY_VERSION: &str = "1";

/// Candidate ids and their global visual features, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub ids: Vec<String>,
    pub features: Matrix,
}

impl Gallery {
    pub fn new(ids: Vec<String>, features: Matrix) -> Result<Self> {
        if ids.len() != features.nrows() {
            return Err(Error::shape("gallery", format!("{} rows", ids.len()), features.nrows()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate gallery id `{dup}`")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gallery features".into(),
            });
        }
        Ok(Self { ids, features })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Embeds images in input order.
    pub fn embed(encoder: &dyn FrozenDualEncoder, items: &[(String, Raster)]) -> Result<Self> {
        let rows = items
            .par_iter()
            .map(|(_, img)| encoder.encode_image_any(img).map(|f| f.global))
            .collect::<Result<Vec<_>>>()?;
        let d = encoder.profile().feature_dim;
        let views: Vec<_> = rows.iter().map(Array1::view).collect();
        let features = if views.is_empty() {
            Matrix::zeros((0, d))
        } else {
            ndarray::stack(Axis(0), &views).expect("equal widths")
        };
        Self::new(items.iter().map(|(id, _)| id.clone()).collect(), features)
    }

    pub fn from_pairs(encoder: &dyn FrozenDualEncoder, pairs: &[RawPair]) -> Result<Self> {
        let items: Vec<_> = pairs.iter().map(|p| (p.id.clone(), p.image.clone())).collect();
        Self::embed(encoder, &items)
    }

    /// Loads every manifest image (paths relative to the manifest) and embeds it.
    pub fn from_manifest(encoder: &dyn FrozenDualEncoder, manifest: &Path) -> Result<Self> {
        let entries = crate::view_forge::read_manifest(manifest)?;
        let items = entries
            .par_iter()
            .map(|e| Ok((e.id.clone(), load_raster(&resolve(manifest, &e.image))?)))
            .collect::<Result<Vec<_>>>()?;
        Self::embed(encoder, &items)
    }

    pub fn save(&self, path: &Path, encoder_checksum: &str) -> Result<()> {
        let mut archive = Archive::default();
        archive.arrays.insert("features".into(), self.features.clone());
        let meta = &mut archive.metadata;
        meta.insert("format".into(), GALLERY_FORMAT.into());
        meta.insert("version".into(), GALLERY_VERSION.into());
        meta.insert("ids".into(), serde_json::to_string(&self.ids).expect("ids serialize"));
        meta.insert("encoder_checksum".into(), encoder_checksum.into());
        write_archive(path, &archive)
    }

    /// Loads a cache file, returning the gallery and the encoder checksum it
    /// was built with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let archive = read_archive(path)?;
        if archive.meta("format")? != GALLERY_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a gallery cache", path.display())));
        }
        let version = archive.meta("version")?;
        if version != GALLERY_VERSION {
            return Err(Error::Checkpoint(format!("unsupported gallery cache version {version}")));
        }
        let ids: Vec<String> = serde_json::from_str(archive.meta("ids")?)
            .map_err(|e| Error::Checkpoint(format!("gallery ids: {e}")))?;
        let gallery = Self::new(ids, archive.array("features")?.clone())?;
        Ok((gallery, archive.meta("encoder_checksum")?.to_string()))
    }
}

/// A reference image with a filled template and its correct targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub reference: Raster,
    pub template: Template,
    pub truths: Vec<String>,
}

/// One line of a query file. `reference` is relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reference: String,
    #[serde(default)]
    pub text: String,
    pub template: String,
    #[serde(default)]
    pub slots: Vec<String>,
    pub truths: Vec<String>,
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let records: Vec<QueryRecord> = crate::view_forge::read_jsonl(path)?;
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let kind: TemplateKind = r.template.parse()?;
            Ok(Query {
                id: r.id.clone().unwrap_or_else(|| format!("q{i:05}")),
                reference: load_raster(&resolve(path, &r.reference))?,
                template: Template::from_parts(kind, &r.slots, &r.text)?,
                truths: r.truths.clone(),
            })
        })
        .collect()
}

/// Writes reference images under `dir/references/` and the query file
/// `dir/queries.jsonl`, returning the latter.
pub fn write_queries(dir: &Path, queries: &[Query]) -> Result<PathBuf> {
    let refs = dir.join("references");
    fs::create_dir_all(&refs).map_err(|e| Error::io(&refs, e))?;
    let mut out = String::new();
    for q in queries {
        let rel = format!("references/{}.png", q.id);
        save_raster(&q.reference, &dir.join(&rel))?;
        let (slots, text) = match &q.template {
            Template::Domain { tag } => (vec![tag.clone()], String::new()),
            Template::Objects { tags } => (tags.clone(), String::new()),
            Template::Sentence { text } => (Vec::new(), text.clone()),
        };
        let kind = serde_json::to_value(q.template.kind()).expect("kind serializes");
        let record = QueryRecord {
            id: Some(q.id.clone()),
            reference: rel,
            text,
            template: kind.as_str().expect("string").to_string(),
            slots,
            truths: q.truths.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    let path = dir.join("queries.jsonl");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Queries built from training pairs: a seeded source crop as reference,
/// the caption as sentence manipulation, the pair itself as the only truth.
pub fn composite_queries(pairs: &[RawPair], crop: &CropConfig, seed: u64) -> Result<Vec<Query>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (w, h) = p.image.dimensions();
            let spec = sample_crop_spec(w, h, crop, &mut stream(seed, "query", i as u64, 0))?;
            Ok(Query {
                id: p.id.clone(),
                reference: spec.apply(&p.image),
                template: Template::Sentence {
                    text: p.caption.clone(),
                },
                truths: vec![p.id.clone()],
            })
        })
        .collect()
}

/// The composed query for one reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedQuery {
    pub prompt: String,
    pub pseudo: PseudoToken,
    pub embedding: Array1<f64>,
}

/// Maps the reference to `S*` (prediction over the mapper's query block,
/// action = the prompt's sentence embedding) and encodes the prompt with `S*`
/// injected.
pub fn compose_query(
    mapper: &PredictiveMapper,
    encoder: &dyn FrozenDualEncoder,
    reference: &Raster,
    template: &Template,
) -> Result<ComposedQuery> {
    let profile = encoder.profile();
    if profile.feature_dim != mapper.feature_dim() || profile.grid != mapper.config.predictor.grid {
        return Err(Error::shape(
            "compose_query encoder",
            format!("d={} g={}", mapper.feature_dim(), mapper.config.predictor.grid),
            format!("d={} g={}", profile.feature_dim, profile.grid),
        ));
    }
    let prompt = template.render();
    let features = encoder.encode_image_any(reference)?;
    let action: ActionEmbedding = encoder.encode_text(&prompt)?.cls;
    let pseudo = mapper.map_pseudo_token(&features, &action, &mapper.config.query_block)?;
    let seq = PromptSequence::from_text(encoder.tokenizer(), &prompt)?.inject(pseudo.clone());
    let embedding = encoder.encode_prompt(&seq)?;
    Ok(ComposedQuery {
        prompt,
        pseudo,
        embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub prompt: String,
    /// 1-based rank of the first correct candidate.
    pub rank: usize,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub gallery: usize,
    pub similarity: Similarity,
    pub ks: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Aligned plain-text table, one column per K.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        write!(out, "{:<8}", "metric").expect("write");
        for k in &self.ks {
            write!(out, "{:>10}", format!("K={k}")).expect("write");
        }
        out.push('\n');
        for (name, values) in [("R@K", &self.recall), ("mAP@K", &self.map)] {
            write!(out, "{name:<8}").expect("write");
            for k in &self.ks {
                write!(out, "{:>10.4}", values[k]).expect("write");
            }
            out.push('\n');
        }
        writeln!(out, "queries: {}  gallery: {}", self.queries, self.gallery).expect("write");
        out
    }
}

/// Sorted, de-duplicated, non-zero K values.
pub fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut v = ks.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() || v[0] == 0 {
        return Err(Error::InvalidInput("K values must be >= 1 and non-empty".into()));
    }
    Ok(v)
}

pub fn evaluate(
    mapper: &PredictiveMapper,
    encoder: &dyn FrozenDualEncoder,
    queries: &[Query],
    gallery: &Gallery,
    ks: &[usize],
    similarity: Similarity,
) -> Result<EvalReport> {
    let ks = normalize_ks(ks)?;
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if gallery.dim() != mapper.feature_dim() {
        return Err(Error::shape(
            "gallery vs checkpoint",
            format!("{} dims", mapper.feature_dim()),
            format!("{} dims", gallery.dim()),
        ));
    }
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    let truths: Vec<Vec<String>> = queries.iter().map(|q| q.truths.clone()).collect();
    check_truths(&ids, &truths, &gallery.ids)?;
    let ranked = queries
        .par_iter()
        .map(|q| {
            let c = compose_query(mapper, encoder, &q.reference, &q.template)?;
            Ok((c.prompt, rank(c.embedding.view(), gallery, similarity)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (prompts, rankings): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    let mut recall = BTreeMap::new();
    let mut map = BTreeMap::new();
    for &k in &ks {
        recall.insert(k, recall_at_k(&rankings, &truths, k)?);
        map.insert(k, map_at_k(&rankings, &truths, k)?);
    }
    let per_query = queries
        .iter()
        .zip(prompts)
        .zip(&rankings)
        .map(|((q, prompt), r)| QueryOutcome {
            id: q.id.clone(),
            prompt,
            rank: r.first_hit(&q.truths).expect("truths are in the gallery"),
            top: r.ids.iter().take(5).cloned().collect(),
        })
        .collect();
    Ok(EvalReport {
        queries: queries.len(),
        gallery: gallery.len(),
        similarity,
        ks,
        recall,
        map,
        per_query,
    })
}
