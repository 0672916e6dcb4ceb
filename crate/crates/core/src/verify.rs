//! Self-checks: finite-difference gradients, brute-force loss and metric
//! oracles, and seeded property sweeps over crops, mask blocks and fusion.

use std::time::{Duration, Instant};

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{contrastive_loss, fuse, FusionConfig, FusionOrder, GateMode, GATE};
use crate::autograd::{Graph, Matrix};
use crate::encoder::{FrozenDualEncoder, PromptSequence, ToyDualEncoder};
use crate::error::{Error, Result};
use crate::model::{evaluate_batch, EncodedTriplet, ModelConfig, PredictiveMapper};
use crate::params::{mlp3, normal_matrix};
use crate::predictor::{prediction_loss, predict, PredictorConfig, ResidualWiring};
use crate::retrieval::{map_at_k, rank, recall_at_k, Gallery, RankedRetrieval, Similarity};
use crate::view_forge::{
    make_triplet, sample_crop_spec, sample_mask_block, synth_dataset, CropConfig, CropSpec, MaskBlock, Raster,
    SynthConfig, ViewConfig, MIN_CROP_SIDE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Grad,
    Oracle,
    Invariants,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Self::Grad),
            "oracle" => Ok(Self::Oracle),
            "invariants" => Ok(Self::Invariants),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidInput(format!(
                "unknown suite `{other}` (grad, oracle, invariants, all)"
            ))),
        }
    }
}

/// One named pass/fail line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{mark}] {}: {}", self.name, self.detail)
    }
}

/// Relative error of two vectors, `‖a − n‖ / max(‖a‖, ‖n‖, floor)`; zero
/// when all three are zero. The floor keeps gradients that vanish exactly
/// (attention key biases, for one) from turning difference noise into an
/// error of 1.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub batch: usize,
    /// Side of the square mask block (`|B| = side²`).
    pub block_side: usize,
    /// Coordinates checked per parameter: the largest analytic entries plus
    /// as many random ones.
    pub per_group: usize,
    pub step: f64,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    pub tau: f64,
    /// `gate_α` during the check; nonzero so the prediction branch carries
    /// gradient into the fusion map.
    pub gate_alpha: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 16,
            heads: 4,
            batch: 4,
            block_side: 2,
            per_group: 4,
            step: 1e-4,
            floor: 1e-4,
            tau: 100.0,
            gate_alpha: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
    /// Finite-difference check of `∂ sentence / ∂ S*` through the frozen text
    /// tower, along random directions.
    pub prompt_rel_error: f64,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

fn grad_fixture(cfg: &GradCheckConfig) -> Result<(PredictiveMapper, ToyDualEncoder, Vec<EncodedTriplet>)> {
    let encoder = ToyDualEncoder::toy(cfg.seed);
    let profile = encoder.profile().clone();
    let grid = profile.grid;
    if cfg.block_side == 0 || cfg.block_side >= grid {
        return Err(Error::InvalidInput(format!("block side must be in 1..{grid}")));
    }
    let predictor = PredictorConfig {
        feature_dim: profile.feature_dim,
        width: cfg.width,
        depth: cfg.depth,
        heads: cfg.heads,
        mlp_ratio: 4,
        grid,
        residual: ResidualWiring::Literal,
        zero_action: false,
    };
    let config = ModelConfig {
        predictor,
        fusion: FusionConfig {
            feature_dim: profile.feature_dim,
            width: cfg.width,
            gate: GateMode::Tanh,
            order: FusionOrder::MapThenAverage,
        },
        tau: cfg.tau,
        query_block: MaskBlock::full(grid),
    };
    let mut mapper = PredictiveMapper::new(config, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    // Move every parameter off its init so zero biases and unit gains are
    // checked at generic points.
    for (name, entry) in mapper.params.iter_mut() {
        let jitter = normal_matrix(entry.value.nrows(), entry.value.ncols(), 0.05, &mut rng);
        entry.value += &jitter;
        if name == GATE {
            entry.value.fill(cfg.gate_alpha);
        }
    }
    let pairs = synth_dataset(cfg.batch, &SynthConfig::default(), &mut rng);
    let items = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let t = make_triplet(pair, &ViewConfig::default(), &mut rng)?;
            let side = cfg.block_side;
            let offset = i % (grid - side + 1);
            Ok(EncodedTriplet {
                id: t.id,
                action: encoder.encode_text(&t.action_text)?.cls,
                source: encoder.encode_image_any(&t.source_image)?,
                target: encoder.encode_image_any(&t.target_image)?,
                block: MaskBlock {
                    grid,
                    top: offset,
                    left: grid - side - offset,
                    rows: side,
                    cols: side,
                    block_scale: (side * side) as f64 / (grid * grid) as f64,
                    block_aspect: 1.0,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mapper, encoder, items))
}

/// Central differences of `L = L_pred + L_align` against the analytic
/// gradient of every trainable parameter.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradReport> {
    let start = Instant::now();
    let (mapper, encoder, items) = grad_fixture(cfg)?;
    let analytic = evaluate_batch(&mapper, &encoder, &items, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut groups = Vec::with_capacity(analytic.grads.len());
    let mut probe = mapper.clone();
    for (name, grad) in &analytic.grads {
        let n = grad.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| grad.as_slice().unwrap()[b].abs().total_cmp(&grad.as_slice().unwrap()[a].abs()));
        let mut picks: Vec<usize> = order.iter().copied().take(cfg.per_group).collect();
        for _ in 0..cfg.per_group {
            picks.push(rng.gen_range(0..n));
        }
        picks.sort_unstable();
        picks.dedup();

        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &flat in &picks {
            let original = mapper.params.get(name).expect("graded parameter").as_slice().unwrap()[flat];
            let mut at = |v: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("graded parameter").as_slice_mut().unwrap()[flat] = v;
                Ok(evaluate_batch(&probe, &encoder, &items, false)?.total)
            };
            let plus = at(original + cfg.step)?;
            let minus = at(original - cfg.step)?;
            at(original)?;
            a.push(grad.as_slice().unwrap()[flat]);
            num.push((plus - minus) / (2.0 * cfg.step));
        }
        groups.push(GroupError {
            name: name.clone(),
            checked: picks.len(),
            rel_error: relative_error(&a, &num, cfg.floor),
        });
    }
    let prompt_rel_error = prompt_jvp_error(&encoder, cfg.step, cfg.floor, &mut rng)?;
    let max_rel_error = groups
        .iter()
        .map(|g| g.rel_error)
        .fold(prompt_rel_error, f64::max);
    Ok(GradReport {
        groups,
        prompt_rel_error,
        max_rel_error,
        elapsed: start.elapsed(),
    })
}

/// Compares `⟨w, J u⟩` for the prompt embedding `t(S*)` against central
/// differences along `u`, over several random `(u, w)`.
fn prompt_jvp_error(encoder: &dyn FrozenDualEncoder, step: f64, floor: f64, rng: &mut impl Rng) -> Result<f64> {
    let d = encoder.profile().feature_dim;
    let seq = PromptSequence::from_text(encoder.tokenizer(), "a photo of [*], on a red wall")?;
    let s = normal_matrix(1, d, 0.5, rng);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..4 {
        let u = normal_matrix(1, d, 1.0, rng);
        let w = normal_matrix(1, d, 1.0, rng);
        let mut g = Graph::new();
        let sv = g.parameter(s.clone());
        let out = encoder.encode_prompt_on(&mut g, &seq, sv)?;
        let wv = g.constant(w.clone());
        let prod = g.matmul_t(out, wv);
        let grads = g.backward(prod);
        let gs = grads.get_or_zeros(sv, (1, d));
        analytic.push((&gs * &u).sum());

        let f = |x: Matrix| -> Result<f64> {
            let e = encoder.encode_prompt(&seq.clone().inject(crate::encoder::PseudoToken(x.row(0).to_owned())))?;
            Ok(e.dot(&w.row(0)))
        };
        let plus = f(&s + &(&u * step))?;
        let minus = f(&s - &(&u * step))?;
        numeric.push((plus - minus) / (2.0 * step));
    }
    Ok(relative_error(&analytic, &numeric, floor))
}

// ------------------------------------------------------------------ oracles

/// `L_t2i + L_i2t` by explicit loops over the batch.
pub fn brute_contrastive(text: &Matrix, image: &Matrix, tau: f64) -> f64 {
    let b = text.nrows();
    let cos = |i: usize, j: usize| {
        let (mut dot, mut nt, mut nv) = (0.0, 0.0, 0.0);
        for k in 0..text.ncols() {
            dot += text[[i, k]] * image[[j, k]];
            nt += text[[i, k]] * text[[i, k]];
            nv += image[[j, k]] * image[[j, k]];
        }
        dot / (nt.sqrt() * nv.sqrt())
    };
    let mut t2i = 0.0;
    let mut i2t = 0.0;
    for i in 0..b {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..b {
            row += (tau * cos(i, j)).exp();
            col += (tau * cos(j, i)).exp();
        }
        t2i += row.ln() - tau * cos(i, i);
        i2t += col.ln() - tau * cos(i, i);
    }
    (t2i + i2t) / b as f64
}

pub fn brute_prediction(predicted: &Matrix, target: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..predicted.nrows() {
        for j in 0..predicted.ncols() {
            let d = predicted[[i, j]] - target[[i, j]];
            total += d * d;
        }
    }
    total
}

fn brute_scores(query: &Array1<f64>, gallery: &Matrix) -> Vec<f64> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    gallery
        .rows()
        .into_iter()
        .map(|row| {
            let mut dot = 0.0;
            let mut rn = 0.0;
            for (a, b) in query.iter().zip(row) {
                dot += a * b;
                rn += b * b;
            }
            dot / (qn * rn.sqrt())
        })
        .collect()
}

/// 1-based rank of each truth, by counting the candidates placed before it.
fn brute_truth_ranks(scores: &[f64], ids: &[String], truths: &[String]) -> Vec<usize> {
    let mut ranks: Vec<usize> = truths
        .iter()
        .map(|t| {
            let i = ids.iter().position(|id| id == t).expect("truth in gallery");
            1 + (0..ids.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                .count()
        })
        .collect();
    ranks.sort_unstable();
    ranks
}

pub fn brute_recall(ranks: &[Vec<usize>], k: usize) -> f64 {
    let hits = ranks.iter().filter(|r| r.iter().any(|&x| x <= k)).count();
    hits as f64 / ranks.len() as f64
}

pub fn brute_map(ranks: &[Vec<usize>], k: usize) -> f64 {
    let total: f64 = ranks
        .iter()
        .map(|r| {
            let mut sum = 0.0;
            for (hits, &rank) in r.iter().enumerate() {
                if rank <= k {
                    sum += (hits + 1) as f64 / rank as f64;
                }
            }
            sum / k.min(r.len()) as f64
        })
        .sum();
    total / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub contrastive_max_error: f64,
    pub prediction_max_error: f64,
    /// `|L(τ→0) − 2 log B|`, worst case.
    pub tau_limit_error: f64,
    pub recall_mismatches: usize,
    pub map_mismatches: usize,
    pub monotonicity_violations: usize,
    /// `mAP@K > R@K` on a single-truth query set.
    pub map_above_recall: usize,
}

impl OracleReport {
    pub fn mismatches(&self) -> usize {
        self.recall_mismatches + self.map_mismatches + self.monotonicity_violations + self.map_above_recall
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new(
                "contrastive loss oracle",
                self.contrastive_max_error <= 1e-10,
                format!("max |Δ| {:.2e} over {} instances", self.contrastive_max_error, self.instances),
            ),
            Check::new(
                "prediction loss oracle",
                self.prediction_max_error <= 1e-10,
                format!("max |Δ| {:.2e} over {} instances", self.prediction_max_error, self.instances),
            ),
            Check::new(
                "temperature limit",
                self.tau_limit_error <= 1e-6,
                format!("max |L - 2 log B| {:.2e}", self.tau_limit_error),
            ),
            Check::new(
                "metric oracles",
                self.mismatches() == 0,
                format!(
                    "recall mismatches {}, mAP mismatches {}, monotonicity violations {}, mAP > R {}",
                    self.recall_mismatches, self.map_mismatches, self.monotonicity_violations, self.map_above_recall
                ),
            ),
        ]
    }
}

/// Loss oracles on `instances` random batches, and metric oracles on as
/// many random gallery instances of `gallery_size` items.
pub fn oracle_suite(instances: usize, gallery_size: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        instances,
        contrastive_max_error: 0.0,
        prediction_max_error: 0.0,
        tau_limit_error: 0.0,
        recall_mismatches: 0,
        map_mismatches: 0,
        monotonicity_violations: 0,
        map_above_recall: 0,
    };
    for _ in 0..instances {
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let text = normal_matrix(b, d, 1.0, &mut rng);
        let image = normal_matrix(b, d, 1.0, &mut rng);
        let tau = rng.gen_range(0.5..100.0);
        let err = (contrastive_loss(&text, &image, tau)? - brute_contrastive(&text, &image, tau)).abs();
        report.contrastive_max_error = report.contrastive_max_error.max(err);
        let limit = contrastive_loss(&text, &image, 1e-9)?;
        report.tau_limit_error = report.tau_limit_error.max((limit - 2.0 * (b as f64).ln()).abs());

        let rows = rng.gen_range(1..=8);
        let p = normal_matrix(rows, d, 1.0, &mut rng);
        let t = normal_matrix(rows, d, 1.0, &mut rng);
        let err = (prediction_loss(&p, &t)? - brute_prediction(&p, &t)).abs();
        report.prediction_max_error = report.prediction_max_error.max(err);

        metric_instance(gallery_size, &mut rng, &mut report)?;
    }
    Ok(report)
}

fn metric_instance(gallery_size: usize, rng: &mut impl Rng, report: &mut OracleReport) -> Result<()> {
    let dim = 6;
    // Coarse features so exact score ties occur and exercise the id order.
    let mut features = normal_matrix(gallery_size, dim, 1.0, rng).mapv(|x| (x * 2.0).round() / 2.0);
    for mut row in features.rows_mut() {
        if row.iter().all(|&x| x == 0.0) {
            row[0] = 1.0;
        }
    }
    // Ids deliberately not in row order.
    let ids: Vec<String> = (0..gallery_size).map(|i| format!("g{:03}", (i * 37) % 1000)).collect();
    let gallery = Gallery::new(ids.clone(), features.clone())?;

    let queries = 10;
    let mut rankings: Vec<RankedRetrieval> = Vec::with_capacity(queries);
    let mut truths = Vec::with_capacity(queries);
    let mut ranks = Vec::with_capacity(queries);
    for qi in 0..queries {
        let q = normal_matrix(1, dim, 1.0, rng).row(0).to_owned();
        // The first half of the queries has a single truth.
        let count = if qi < queries / 2 { 1 } else { rng.gen_range(1..=4) };
        let mut t: Vec<String> = Vec::with_capacity(count);
        while t.len() < count {
            let id = ids[rng.gen_range(0..gallery_size)].clone();
            if !t.contains(&id) {
                t.push(id);
            }
        }
        rankings.push(rank(q.view(), &gallery, Similarity::Cosine)?);
        ranks.push(brute_truth_ranks(&brute_scores(&q, &features), &ids, &t));
        truths.push(t);
    }
    let half = queries / 2;
    let mut prev = 0.0;
    for k in 1..=gallery_size {
        let r = recall_at_k(&rankings, &truths, k)?;
        let m = map_at_k(&rankings, &truths, k)?;
        if r != brute_recall(&ranks, k) {
            report.recall_mismatches += 1;
        }
        if m != brute_map(&ranks, k) {
            report.map_mismatches += 1;
        }
        if r < prev {
            report.monotonicity_violations += 1;
        }
        prev = r;
        let single_r = recall_at_k(&rankings[..half], &truths[..half], k)?;
        let single_m = map_at_k(&rankings[..half], &truths[..half], k)?;
        if single_m > single_r {
            report.map_above_recall += 1;
        }
    }
    Ok(())
}

// --------------------------------------------------------------- properties

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropSweep {
    pub samples: usize,
    pub area_law_violations: usize,
    pub containment_violations: usize,
    /// Crops whose drawn `(s, r)` lies outside the configured ranges.
    pub range_violations: usize,
}

impl CropSweep {
    pub fn passed(&self) -> bool {
        self.area_law_violations == 0 && self.containment_violations == 0 && self.range_violations == 0
    }
}

/// `W_c` and `H_c` lie within half a pixel of `√(s·r·W·H)` and `√(s·W·H/r)`
/// unless raised to the minimum side.
fn area_law_holds(spec: &CropSpec, w: u32, h: u32) -> bool {
    let area = w as f64 * h as f64 * spec.scale;
    let ideal_w = (area * spec.aspect).sqrt();
    let ideal_h = (area / spec.aspect).sqrt();
    let side_ok = |got: u32, ideal: f64, limit: u32| {
        (got as f64 - ideal).abs() <= 0.5 || (got == MIN_CROP_SIDE.min(limit) && ideal < got as f64)
    };
    side_ok(spec.width, ideal_w, w) && side_ok(spec.height, ideal_h, h)
}

fn noise_raster(w: u32, h: u32, rng: &mut impl Rng) -> Raster {
    Raster::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

/// Seeded crop draws at `cfg`. Image sides are drawn from `sizes`; every
/// crop is cut from a noise raster and compared pixel by pixel.
pub fn crop_sweep(samples: usize, cfg: &CropConfig, sizes: (u32, u32), seed: u64) -> Result<CropSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CropSweep {
        samples,
        area_law_violations: 0,
        containment_violations: 0,
        range_violations: 0,
    };
    let mut image = noise_raster(sizes.1, sizes.1, &mut rng);
    for i in 0..samples {
        let w = rng.gen_range(sizes.0..=sizes.1);
        let h = rng.gen_range(sizes.0..=sizes.1);
        if i % 64 == 0 {
            image = noise_raster(sizes.1, sizes.1, &mut rng);
        }
        let src = image::imageops::crop_imm(&image, 0, 0, w, h).to_image();
        let spec = sample_crop_spec(w, h, cfg, &mut rng)?;
        if !(cfg.scale.0..=cfg.scale.1).contains(&spec.scale) {
            out.range_violations += 1;
        }
        if !area_law_holds(&spec, w, h) {
            out.area_law_violations += 1;
        }
        let inside = spec.x + spec.width <= w && spec.y + spec.height <= h;
        let exact = inside && {
            let crop = spec.apply(&src);
            crop.dimensions() == (spec.width, spec.height)
                && crop
                    .enumerate_pixels()
                    .all(|(x, y, p)| p == src.get_pixel(spec.x + x, spec.y + y))
        };
        if !exact {
            out.containment_violations += 1;
        }
    }
    Ok(out)
}

/// Fusion with `gate_α = 0` returns exactly `f_Ms(v)` and ignores the
/// predictor rows. Returns the number of failing samples.
pub fn gate_zero_violations(samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FusionConfig {
        feature_dim: 32,
        width: 16,
        gate: GateMode::Tanh,
        order: FusionOrder::MapThenAverage,
    };
    let mut store = crate::params::ParamStore::new();
    crate::alignment::init_fusion(&cfg, &mut store, &mut rng);
    for (name, entry) in store.iter_mut() {
        if name != GATE {
            let jitter = normal_matrix(entry.value.nrows(), entry.value.ncols(), 0.1, &mut rng);
            entry.value += &jitter;
        }
    }
    let mut failures = 0;
    for _ in 0..samples {
        let rows = rng.gen_range(1..=16);
        let e = normal_matrix(16, 16, 1.0, &mut rng);
        let p = normal_matrix(rows, 16, 1.0, &mut rng);
        let v = normal_matrix(1, 32, 1.0, &mut rng).row(0).to_owned();
        let s = fuse(&store, &cfg, &e, &p, &v)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(v.clone().insert_axis(Axis(0)));
        let y = mlp3(&mut g, &bound, "fusion.source_map", x)?;
        let source_only = g.value(y).row(0).to_owned();
        let scale = rng.gen_range(-100.0..100.0);
        let p2 = normal_matrix(rows, 16, 1.0, &mut rng) * scale;
        let e2 = normal_matrix(16, 16, 1.0, &mut rng) * scale;
        let s2 = fuse(&store, &cfg, &e2, &p2, &v)?;
        if s.0 != source_only || s2.0 != s.0 {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Mask blocks stay inside the grid, are non-empty, and are strict subsets.
pub fn mask_block_violations(samples: usize, cfg: &CropConfig, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..samples {
        let grid = rng.gen_range(2..=16);
        let b = sample_mask_block(grid, cfg, false, &mut rng)?;
        let ok = !b.is_empty()
            && !b.is_full()
            && b.top + b.rows <= grid
            && b.left + b.cols <= grid
            && b.flat_indices().iter().all(|&i| i < grid * grid);
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Predictor outputs have the documented shapes for random blocks.
pub fn predictor_shape_violations(samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PredictorConfig {
        depth: 1,
        width: 16,
        heads: 4,
        ..PredictorConfig::toy()
    };
    let mut store = crate::params::ParamStore::new();
    crate::predictor::init_predictor(&cfg, &mut store, &mut rng)?;
    let mut failures = 0;
    for _ in 0..samples {
        let block = sample_mask_block(cfg.grid, &CropConfig::default(), false, &mut rng)?;
        let action = crate::encoder::ActionEmbedding(normal_matrix(1, cfg.feature_dim, 1.0, &mut rng).row(0).to_owned());
        let patches = normal_matrix(cfg.cells(), cfg.feature_dim, 1.0, &mut rng);
        let source = crate::encoder::VisualFeatures {
            global: patches.mean_axis(Axis(0)).expect("rows"),
            patches,
            grid: cfg.grid,
        };
        let out = predict(&store, &cfg, &action, &source, &block)?;
        let ok = out.action_out.len() == cfg.width
            && out.enhanced_source.dim() == (cfg.cells(), cfg.width)
            && out.predicted_patches.dim() == (block.len(), cfg.width)
            && out.predicted_patches.iter().all(|x| x.is_finite());
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}

pub fn invariants_suite(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let crops = crop_sweep(samples, &CropConfig::default(), (32, 256), seed)?;
    let gate = gate_zero_violations(samples, seed)?;
    let blocks = mask_block_violations(samples, &CropConfig::default(), seed)?;
    let shapes = predictor_shape_violations(samples.min(200), seed)?;
    Ok(vec![
        Check::new(
            "crop geometry",
            crops.passed(),
            format!(
                "{} crops: {} area-law, {} containment, {} range violations",
                crops.samples, crops.area_law_violations, crops.containment_violations, crops.range_violations
            ),
        ),
        Check::new("gate-zero identity", gate == 0, format!("{gate} of {samples} samples differ")),
        Check::new("mask blocks", blocks == 0, format!("{blocks} of {samples} blocks invalid")),
        Check::new("predictor shapes", shapes == 0, format!("{shapes} of {} passes malformed", samples.min(200))),
    ])
}

pub fn grad_checks(report: &GradReport, threshold: f64) -> Vec<Check> {
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .map(|g| g.name.as_str())
        .unwrap_or("-");
    vec![Check::new(
        "gradient check",
        report.max_rel_error < threshold,
        format!(
            "{} parameter groups, max relative error {:.2e} (worst `{worst}`), prompt JVP {:.2e}, {:.1}s",
            report.groups.len(),
            report.max_rel_error,
            report.prompt_rel_error,
            report.elapsed.as_secs_f64()
        ),
    )]
}

/// Runs the requested suite(s) with their default sizes.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        let report = grad_check(&GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        })?;
        checks.extend(grad_checks(&report, 1e-4));
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.extend(oracle_suite(100, 50, seed)?.checks());
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        checks.extend(invariants_suite(1000, seed)?);
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0], 0.0), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0], 0.0), 0.0);
        assert!((relative_error(&[1.0], &[0.0], 0.0) - 1.0).abs() < 1e-15);
        assert!(relative_error(&[0.0], &[1e-11], 1e-6) < 1e-4);
    }

    #[test]
    fn brute_map_matches_hand_values() {
        // Truth ranks 1 and 3.
        assert!((brute_map(&[vec![1, 3]], 5) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(brute_map(&[vec![2]], 1), 0.0);
        assert_eq!(brute_recall(&[vec![2], vec![7]], 5), 0.5);
    }

    #[test]
    fn small_oracle_run_is_clean() {
        let r = oracle_suite(5, 20, 3).unwrap();
        assert!(r.checks().iter().all(|c| c.passed), "{:?}", r.checks());
    }

    #[test]
    fn small_invariant_run_is_clean() {
        let checks = invariants_suite(100, 4).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }
}
