//! Predictive cross-modal alignment: gated fusion of predicted and source
//! content into the pseudo-word token, and the symmetric contrastive loss
//! between prompted sentence embeddings and global target features.

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::encoder::{FrozenDualEncoder, PromptSequence, PseudoToken};
use crate::error::{Error, Result};
use crate::params::{init_mlp3, mlp3, Bound, Decay, ParamStore};

pub const GATE: &str = "fusion.gate_alpha";
pub const TRAINING_PROMPT: &str = "a photo of [*]";

/// How the prediction branch is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `tanh(gate_α)` with `gate_α` learned from zero.
    #[default]
    Tanh,
    /// Direct sum of both branches.
    Ungated,
}

/// Where the average pooling sits relative to the prediction mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// `f_Ms(v) + gate · Avg(f_Mp(rows))`
    #[default]
    MapThenAverage,
    /// `f_Mp(gate · Avg(rows)) + f_Ms(v)`
    AverageThenMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub gate: GateMode,
    pub order: FusionOrder,
}

pub fn init_fusion(cfg: &FusionConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    let (d, p) = (cfg.feature_dim, cfg.width);
    init_mlp3(store, "fusion.predict_map", p, 4 * d, d, rng);
    init_mlp3(store, "fusion.source_map", d, 4 * d, d, rng);
    store.insert(GATE, Matrix::zeros((1, 1)), Decay::Exempt);
}

/// Current gate multiplier `tanh(gate_α)`, or 1 when ungated.
pub fn gate_value(cfg: &FusionConfig, params: &ParamStore) -> f64 {
    match cfg.gate {
        GateMode::Tanh => params.get(GATE).map_or(0.0, |g| g[[0, 0]].tanh()),
        GateMode::Ungated => 1.0,
    }
}

/// Records `S*` (`1×d`) on the graph.
pub fn fuse_pseudo_token(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    enhanced_source: Var,
    predicted: Var,
    global_source: Var,
) -> Result<Var> {
    let (d, w) = (cfg.feature_dim, cfg.width);
    if g.shape(enhanced_source).1 != w || g.shape(predicted).1 != w {
        return Err(Error::shape(
            "fuse_pseudo_token rows",
            format!("width {w}"),
            format!("{:?} / {:?}", g.shape(enhanced_source), g.shape(predicted)),
        ));
    }
    if g.shape(global_source) != (1, d) {
        return Err(Error::shape(
            "fuse_pseudo_token global",
            format!("(1, {d})"),
            format!("{:?}", g.shape(global_source)),
        ));
    }
    let source = mlp3(g, p, "fusion.source_map", global_source)?;
    let rows = g.concat_rows(&[enhanced_source, predicted]);
    let gate = match cfg.gate {
        GateMode::Tanh => {
            let alpha = p.var(GATE)?;
            Some(g.tanh(alpha))
        }
        GateMode::Ungated => None,
    };
    let branch = match cfg.order {
        FusionOrder::MapThenAverage => {
            let mapped = mlp3(g, p, "fusion.predict_map", rows)?;
            let pooled = g.mean_rows(mapped);
            match gate {
                Some(t) => g.scale_by(pooled, t),
                None => pooled,
            }
        }
        FusionOrder::AverageThenMap => {
            let pooled = g.mean_rows(rows);
            let gated = match gate {
                Some(t) => g.scale_by(pooled, t),
                None => pooled,
            };
            mlp3(g, p, "fusion.predict_map", gated)?
        }
    };
    Ok(g.add(source, branch))
}

/// Evaluates `S*` without gradient tracking.
pub fn fuse(
    params: &ParamStore,
    cfg: &FusionConfig,
    enhanced_source: &Matrix,
    predicted: &Matrix,
    global_source: &Array1<f64>,
) -> Result<PseudoToken> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let e = g.constant(enhanced_source.clone());
    let pr = g.constant(predicted.clone());
    let v = g.constant(global_source.clone().insert_axis(Axis(0)));
    let s = fuse_pseudo_token(&mut g, &bound, cfg, e, pr, v)?;
    Ok(PseudoToken(g.value(s).row(0).to_owned()))
}

/// Records `L_t2i + L_i2t` over `B×d` batches of sentence embeddings and
/// global target features. Rows are L2-normalized before the scaled dot
/// products.
pub fn contrastive_loss_on(g: &mut Graph, text: Var, image: Var, tau: f64) -> Result<Var> {
    let (b, d) = g.shape(text);
    if g.shape(image) != (b, d) {
        return Err(Error::shape("contrastive_loss", format!("({b}, {d})"), format!("{:?}", g.shape(image))));
    }
    if b < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let t = g.normalize_rows(text);
    let v = g.normalize_rows(image);
    let sims = g.matmul_t(t, v);
    let logits = g.scale(sims, tau);
    let t2i = g.diag_cross_entropy(logits);
    let transposed = g.transpose(logits);
    let i2t = g.diag_cross_entropy(transposed);
    Ok(g.add(t2i, i2t))
}

pub fn contrastive_loss(text: &Matrix, image: &Matrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let v = g.constant(image.clone());
    let l = contrastive_loss_on(&mut g, t, v, tau)?;
    Ok(g.scalar(l))
}

/// Unweighted sum of the two objectives.
pub fn total_loss(prediction: f64, alignment: f64) -> Result<f64> {
    if !prediction.is_finite() || !alignment.is_finite() {
        return Err(Error::NonFinite {
            context: format!("total loss inputs ({prediction}, {alignment})"),
        });
    }
    Ok(prediction + alignment)
}

/// `"a photo of [*]"` with `S*` injected at the trailing slot.
pub fn build_training_prompt(encoder: &dyn FrozenDualEncoder, token: PseudoToken) -> Result<PromptSequence> {
    let d = encoder.profile().feature_dim;
    if token.0.len() != d {
        return Err(Error::shape("pseudo token", d, token.0.len()));
    }
    Ok(PromptSequence::from_text(encoder.tokenizer(), TRAINING_PROMPT)?.inject(token))
}
