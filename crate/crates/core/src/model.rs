//! The trainable mapper (predictor + fusion) and its batch objective.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    contrastive_loss_on, fuse_pseudo_token, gate_value, init_fusion, FusionConfig, TRAINING_PROMPT,
};
use crate::autograd::{Graph, Matrix, Var};
use crate::encoder::{ActionEmbedding, FrozenDualEncoder, PromptSequence, PseudoToken, VisualFeatures};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::predictor::{init_predictor, predictor_forward, project_predictions, PredictorConfig};
use crate::view_forge::MaskBlock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub predictor: PredictorConfig,
    pub fusion: FusionConfig,
    /// Logit scale applied to cosine similarities in the contrastive loss.
    pub tau: f64,
    /// Block predicted when composing a query: the mid-range training draw,
    /// centered, or the full grid when training predicted the entire target.
    pub query_block: MaskBlock,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        if self.fusion.feature_dim != self.predictor.feature_dim || self.fusion.width != self.predictor.width {
            return Err(Error::InvalidInput("fusion and predictor widths disagree".into()));
        }
        if self.query_block.grid != self.predictor.grid || self.query_block.is_empty() {
            return Err(Error::InvalidInput("query block does not fit the predictor grid".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Trainable parameters of the prediction-based mapping network.
#[derive(Debug, Clone)]
pub struct PredictiveMapper {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl PredictiveMapper {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_predictor(&config.predictor, &mut params, &mut rng)?;
        init_fusion(&config.fusion, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn gate_value(&self) -> f64 {
        gate_value(&self.config.fusion, &self.params)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.predictor.feature_dim
    }

    /// Predicts from `reference` under `action` and fuses the pseudo-token.
    pub fn map_pseudo_token(
        &self,
        reference: &VisualFeatures,
        action: &ActionEmbedding,
        block: &MaskBlock,
    ) -> Result<PseudoToken> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let s = map_on(&mut g, &bound, &self.config, reference, action, block)?;
        Ok(PseudoToken(g.value(s.pseudo).row(0).to_owned()))
    }
}

/// One triplet after frozen encoding.
#[derive(Debug, Clone)]
pub struct EncodedTriplet {
    pub id: String,
    pub action: ActionEmbedding,
    pub source: VisualFeatures,
    pub target: VisualFeatures,
    pub block: MaskBlock,
}

struct Mapped {
    pseudo: Var,
    predicted: Var,
}

fn row(g: &mut Graph, v: &Array1<f64>) -> Var {
    g.constant(v.clone().insert_axis(Axis(0)))
}

fn map_on(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    source: &VisualFeatures,
    action: &ActionEmbedding,
    block: &MaskBlock,
) -> Result<Mapped> {
    let a = row(g, &action.0);
    let patches = g.constant(source.patches.clone());
    let out = predictor_forward(g, p, &cfg.predictor, a, patches, block)?;
    let global = row(g, &source.global);
    let pseudo = fuse_pseudo_token(g, p, &cfg.fusion, out.enhanced_source, out.predicted_patches, global)?;
    Ok(Mapped {
        pseudo,
        predicted: out.predicted_patches,
    })
}

/// Graph handles of a batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub prediction: Var,
    pub alignment: Var,
    pub total: Var,
    pub pseudo_tokens: Vec<Var>,
}

/// `L = L_pred + L_align` over a batch; `L_pred` is averaged over items.
pub fn batch_objective(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    encoder: &dyn FrozenDualEncoder,
    items: &[EncodedTriplet],
) -> Result<BatchObjective> {
    if items.len() < 2 {
        return Err(Error::InvalidInput(format!("batch of {} is too small", items.len())));
    }
    let prompt = PromptSequence::from_text(encoder.tokenizer(), TRAINING_PROMPT)?;
    let mut pred_terms = Vec::with_capacity(items.len());
    let mut sentences = Vec::with_capacity(items.len());
    let mut pseudo_tokens = Vec::with_capacity(items.len());
    for item in items {
        let mapped = map_on(g, p, cfg, &item.source, &item.action, &item.block)?;
        let projected = project_predictions(g, p, mapped.predicted)?;
        let target = g.constant(item.target.patches.select(Axis(0), &item.block.flat_indices()));
        pred_terms.push(g.squared_distance(projected, target));
        sentences.push(encoder.encode_prompt_on(g, &prompt, mapped.pseudo)?);
        pseudo_tokens.push(mapped.pseudo);
    }
    let mut sum = pred_terms[0];
    for &t in &pred_terms[1..] {
        sum = g.add(sum, t);
    }
    let prediction = g.scale(sum, 1.0 / items.len() as f64);

    let text = g.concat_rows(&sentences);
    let globals: Vec<_> = items.iter().map(|i| i.target.global.view()).collect();
    let image = g.constant(ndarray::stack(Axis(0), &globals).expect("equal widths"));
    let alignment = contrastive_loss_on(g, text, image, cfg.tau)?;
    let total = g.add(prediction, alignment);
    Ok(BatchObjective {
        prediction,
        alignment,
        total,
        pseudo_tokens,
    })
}

/// Loss values and per-parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub prediction: f64,
    pub alignment: f64,
    pub total: f64,
    pub grads: Vec<(String, Matrix)>,
}

pub fn evaluate_batch(
    mapper: &PredictiveMapper,
    encoder: &dyn FrozenDualEncoder,
    items: &[EncodedTriplet],
    with_grads: bool,
) -> Result<Evaluated> {
    let mut g = Graph::new();
    let bound = mapper.params.bind(&mut g, with_grads);
    let obj = batch_objective(&mut g, &bound, &mapper.config, encoder, items)?;
    let grads = if with_grads {
        let back = g.backward(obj.total);
        bound
            .iter()
            .map(|(name, v)| (name.to_string(), back.get_or_zeros(v, g.shape(v))))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Evaluated {
        prediction: g.scalar(obj.prediction),
        alignment: g.scalar(obj.alignment),
        total: g.scalar(obj.total),
        grads,
    })
}
