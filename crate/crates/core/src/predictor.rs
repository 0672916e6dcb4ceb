//! Target content predictor: a narrow transformer over
//! `[action, source patches, mask tokens]` that predicts the target patches
//! missing from the source view.

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::encoder::{ActionEmbedding, VisualFeatures};
use crate::error::{Error, Result};
use crate::params::{
    init_layer_norm, init_linear, layer_norm, linear, normal_matrix, Bound, Decay, ParamStore,
};
use crate::view_forge::MaskBlock;

/// Residual wiring inside each predictor block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualWiring {
    /// `X = FFW(X_att + X_prev) + X_att`
    #[default]
    Literal,
    /// `H = X_att + X_prev; X = FFW(H) + H`
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Encoder feature width `d`.
    pub feature_dim: usize,
    /// Predictor width `p`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub grid: usize,
    pub residual: ResidualWiring,
    /// Replace the action row with zeros.
    pub zero_action: bool,
}

impl PredictorConfig {
    /// 12 blocks of width 384 with 8 heads.
    pub fn full_scale(feature_dim: usize, grid: usize) -> Self {
        Self {
            feature_dim,
            width: 384,
            depth: 12,
            heads: 8,
            mlp_ratio: 4,
            grid,
            residual: ResidualWiring::Literal,
            zero_action: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            feature_dim: 32,
            width: 64,
            depth: 2,
            heads: 8,
            mlp_ratio: 4,
            grid: 4,
            residual: ResidualWiring::Literal,
            zero_action: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "predictor heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.grid < 2 || self.feature_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidInput("predictor dims must be positive, grid >= 2".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

pub fn init_predictor(cfg: &PredictorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (d, p) = (cfg.feature_dim, cfg.width);
    init_linear(store, "predictor.input_proj", d, p, rng);
    store.insert("predictor.mask_token", normal_matrix(1, p, 0.02, rng), Decay::Exempt);
    store.insert("predictor.position", normal_matrix(cfg.cells(), p, 0.02, rng), Decay::Exempt);
    for i in 0..cfg.depth {
        let b = format!("predictor.blocks.{i}");
        init_layer_norm(store, &format!("{b}.norm1"), p);
        for proj in ["query", "key", "value", "output"] {
            init_linear(store, &format!("{b}.attn.{proj}"), p, p, rng);
        }
        init_layer_norm(store, &format!("{b}.norm2"), p);
        init_linear(store, &format!("{b}.ffn.0"), p, cfg.mlp_ratio * p, rng);
        init_linear(store, &format!("{b}.ffn.1"), cfg.mlp_ratio * p, p, rng);
    }
    init_linear(store, "predictor.head", p, d, rng);
    Ok(())
}

/// Graph handles for one predictor pass, partitioned by position.
#[derive(Debug, Clone, Copy)]
pub struct PredictorVars {
    /// `1×p`
    pub action_out: Var,
    /// `g²×p`
    pub enhanced_source: Var,
    /// `|B|×p`, ordered like [`MaskBlock::indices`]
    pub predicted_patches: Var,
}

/// Shared mask vector plus the positional embedding of each block position.
pub fn build_mask_tokens(g: &mut Graph, p: &Bound, block: &MaskBlock) -> Result<Var> {
    let shared = p.var("predictor.mask_token")?;
    let table = p.var("predictor.position")?;
    let pos = g.select_rows(table, &block.flat_indices());
    Ok(g.add_row(pos, shared))
}

fn attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let q = linear(g, p, &format!("{prefix}.query"), x)?;
    let k = linear(g, p, &format!("{prefix}.key"), x)?;
    let v = linear(g, p, &format!("{prefix}.value"), x)?;
    let width = g.shape(x).1;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh));
    }
    let cat = g.concat_cols(&outs);
    linear(g, p, &format!("{prefix}.output"), cat)
}

fn block(g: &mut Graph, p: &Bound, cfg: &PredictorConfig, i: usize, x: Var) -> Result<Var> {
    let b = format!("predictor.blocks.{i}");
    let h = layer_norm(g, p, &format!("{b}.norm1"), x)?;
    let x_att = attention(g, p, &format!("{b}.attn"), h, cfg.heads)?;
    let mixed = g.add(x_att, x);
    let h = layer_norm(g, p, &format!("{b}.norm2"), mixed)?;
    let h = linear(g, p, &format!("{b}.ffn.0"), h)?;
    let h = g.gelu(h);
    let ffw = linear(g, p, &format!("{b}.ffn.1"), h)?;
    Ok(match cfg.residual {
        ResidualWiring::Literal => g.add(ffw, x_att),
        ResidualWiring::Standard => g.add(ffw, mixed),
    })
}

/// Runs the predictor on `action` (`1×d`) and `source_patches` (`g²×d`).
pub fn predictor_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &PredictorConfig,
    action: Var,
    source_patches: Var,
    block_spec: &MaskBlock,
) -> Result<PredictorVars> {
    let (d, cells) = (cfg.feature_dim, cfg.cells());
    if g.shape(action) != (1, d) {
        return Err(Error::shape("predictor action", format!("(1, {d})"), format!("{:?}", g.shape(action))));
    }
    if g.shape(source_patches) != (cells, d) {
        return Err(Error::shape(
            "predictor source patches",
            format!("({cells}, {d})"),
            format!("{:?}", g.shape(source_patches)),
        ));
    }
    if block_spec.grid != cfg.grid || block_spec.is_empty() {
        return Err(Error::shape(
            "mask block",
            format!("non-empty block on a {0}x{0} grid", cfg.grid),
            format!("{}x{} block on a {1}x{1} grid", block_spec.rows, block_spec.grid),
        ));
    }

    let a = if cfg.zero_action {
        g.constant(Matrix::zeros((1, cfg.width)))
    } else {
        linear(g, p, "predictor.input_proj", action)?
    };
    let s = linear(g, p, "predictor.input_proj", source_patches)?;
    let table = p.var("predictor.position")?;
    let s = g.add(s, table);
    let m = build_mask_tokens(g, p, block_spec)?;
    let mut x = g.concat_rows(&[a, s, m]);

    for i in 0..cfg.depth {
        x = block(g, p, cfg, i, x)?;
        if !g.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("predictor block {i}"),
            });
        }
    }

    let total = g.shape(x).0;
    let source_rows: Vec<usize> = (1..=cells).collect();
    let mask_rows: Vec<usize> = (cells + 1..total).collect();
    Ok(PredictorVars {
        action_out: g.select_rows(x, &[0]),
        enhanced_source: g.select_rows(x, &source_rows),
        predicted_patches: g.select_rows(x, &mask_rows),
    })
}

/// Maps predicted patches (`|B|×p`) to the encoder width for the latent loss.
pub fn project_predictions(g: &mut Graph, p: &Bound, predicted: Var) -> Result<Var> {
    linear(g, p, "predictor.head", predicted)
}

/// `Σ_i ‖predicted_i − target_i‖²` over the block rows.
pub fn prediction_loss(predicted: &Matrix, target: &Matrix) -> Result<f64> {
    if predicted.dim() != target.dim() {
        return Err(Error::shape(
            "prediction_loss",
            format!("{:?}", target.dim()),
            format!("{:?}", predicted.dim()),
        ));
    }
    let mut g = Graph::new();
    let a = g.constant(predicted.clone());
    let b = g.constant(target.clone());
    let l = g.squared_distance(a, b);
    Ok(g.scalar(l))
}

/// Evaluated predictor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub action_out: Array1<f64>,
    pub enhanced_source: Matrix,
    pub predicted_patches: Matrix,
}

/// Inference-mode forward without gradient tracking.
pub fn predict(
    params: &ParamStore,
    cfg: &PredictorConfig,
    action: &ActionEmbedding,
    source: &VisualFeatures,
    block_spec: &MaskBlock,
) -> Result<PredictorOutput> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let a = g.constant(action.0.clone().insert_axis(Axis(0)));
    let s = g.constant(source.patches.clone());
    let out = predictor_forward(&mut g, &bound, cfg, a, s, block_spec)?;
    Ok(PredictorOutput {
        action_out: g.value(out.action_out).row(0).to_owned(),
        enhanced_source: g.value(out.enhanced_source).clone(),
        predicted_patches: g.value(out.predicted_patches).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &PredictorConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_predictor(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    fn inputs(cfg: &PredictorConfig, seed: u64) -> (ActionEmbedding, VisualFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let action = ActionEmbedding(normal_matrix(1, cfg.feature_dim, 1.0, &mut rng).row(0).to_owned());
        let patches = normal_matrix(cfg.cells(), cfg.feature_dim, 1.0, &mut rng);
        let global = patches.mean_axis(Axis(0)).unwrap();
        (
            action,
            VisualFeatures {
                global,
                patches,
                grid: cfg.grid,
            },
        )
    }

    fn block_at(top: usize, left: usize) -> MaskBlock {
        MaskBlock {
            grid: 4,
            top,
            left,
            rows: 2,
            cols: 2,
            block_scale: 0.25,
            block_aspect: 1.0,
        }
    }

    #[test]
    fn zeroed_positions_give_shared_vector_rows() {
        let cfg = PredictorConfig::toy();
        let mut store = setup(&cfg, 0);
        *store.get_mut("predictor.position").unwrap() = Matrix::zeros((16, 64));
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let m = build_mask_tokens(&mut g, &bound, &block_at(1, 1)).unwrap();
        let shared = store.get("predictor.mask_token").unwrap().row(0).to_owned();
        assert_eq!(g.shape(m), (4, 64));
        for row in g.value(m).rows() {
            assert_eq!(row, shared);
        }
    }

    #[test]
    fn different_offsets_give_different_tokens() {
        let cfg = PredictorConfig::toy();
        let store = setup(&cfg, 1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let a = build_mask_tokens(&mut g, &bound, &block_at(0, 0)).unwrap();
        let b = build_mask_tokens(&mut g, &bound, &block_at(2, 2)).unwrap();
        for ra in g.value(a).rows() {
            for rb in g.value(b).rows() {
                assert_ne!(ra, rb);
            }
        }
    }

    #[test]
    fn zero_depth_passes_mask_tokens_through() {
        let cfg = PredictorConfig {
            depth: 0,
            ..PredictorConfig::toy()
        };
        let store = setup(&cfg, 2);
        let (action, source) = inputs(&cfg, 3);
        let block = block_at(1, 2);
        let out = predict(&store, &cfg, &action, &source, &block).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let m = build_mask_tokens(&mut g, &bound, &block).unwrap();
        assert_eq!(&out.predicted_patches, g.value(m));
    }

    #[test]
    fn output_partition_sizes() {
        let cfg = PredictorConfig::toy();
        let store = setup(&cfg, 4);
        let (action, source) = inputs(&cfg, 5);
        for block in [block_at(0, 0), MaskBlock::full(4)] {
            let out = predict(&store, &cfg, &action, &source, &block).unwrap();
            assert_eq!(out.action_out.len(), 64);
            assert_eq!(out.enhanced_source.dim(), (16, 64));
            assert_eq!(out.predicted_patches.dim(), (block.len(), 64));
        }
    }

    #[test]
    fn permuting_source_rows_with_positions_is_invariant() {
        let cfg = PredictorConfig::toy();
        let mut store = setup(&cfg, 6);
        let (action, source) = inputs(&cfg, 7);
        let mb = block_at(1, 1);
        let before = predict(&store, &cfg, &action, &source, &mb).unwrap();

        // The source rows receive the positional table in order, so a permuted
        // source needs the table permuted the same way. The mask tokens keep
        // their own (unpermuted) positions.
        let perm: Vec<usize> = (0..16).rev().collect();
        let table = store.get("predictor.position").unwrap().clone();
        let permuted_source = VisualFeatures {
            patches: source.patches.select(Axis(0), &perm),
            ..source.clone()
        };
        let mut g = Graph::new();
        *store.get_mut("predictor.position").unwrap() = table.select(Axis(0), &perm);
        let bound = store.bind(&mut g, false);
        let mask_table = g.constant(table.clone());
        let shared = bound.var("predictor.mask_token").unwrap();
        let pos = g.select_rows(mask_table, &mb.flat_indices());
        let mask = g.add_row(pos, shared);
        let a = g.constant(action.0.clone().insert_axis(Axis(0)));
        let s = g.constant(permuted_source.patches.clone());
        let a = linear(&mut g, &bound, "predictor.input_proj", a).unwrap();
        let s = linear(&mut g, &bound, "predictor.input_proj", s).unwrap();
        let ptable = bound.var("predictor.position").unwrap();
        let s = g.add(s, ptable);
        let mut x = g.concat_rows(&[a, s, mask]);
        for i in 0..cfg.depth {
            x = block(&mut g, &bound, &cfg, i, x).unwrap();
        }
        let rows: Vec<usize> = (17..21).collect();
        let after = g.select_rows(x, &rows);
        let diff = (&before.predicted_patches - g.value(after)).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12), "{diff:?}");
    }

    #[test]
    fn identical_items_give_identical_outputs() {
        let cfg = PredictorConfig::toy();
        let store = setup(&cfg, 8);
        let (action, source) = inputs(&cfg, 9);
        let a = predict(&store, &cfg, &action, &source, &block_at(0, 1)).unwrap();
        let b = predict(&store, &cfg, &action, &source, &block_at(0, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn action_row_conditions_predictions() {
        let cfg = PredictorConfig::toy();
        let store = setup(&cfg, 10);
        let (action, source) = inputs(&cfg, 11);
        let with = predict(&store, &cfg, &action, &source, &block_at(2, 0)).unwrap();
        let without_cfg = PredictorConfig {
            zero_action: true,
            ..cfg
        };
        let without = predict(&store, &without_cfg, &action, &source, &block_at(2, 0)).unwrap();
        assert_ne!(with.predicted_patches, without.predicted_patches);
    }

    #[test]
    fn shape_errors() {
        let cfg = PredictorConfig::toy();
        let store = setup(&cfg, 12);
        let (action, mut source) = inputs(&cfg, 13);
        source.patches = Matrix::zeros((9, 32));
        assert!(matches!(
            predict(&store, &cfg, &action, &source, &block_at(0, 0)),
            Err(Error::Shape { .. })
        ));
        let bad = PredictorConfig { heads: 7, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_activations_name_the_block() {
        let cfg = PredictorConfig::toy();
        let mut store = setup(&cfg, 14);
        store.get_mut("predictor.blocks.1.ffn.1.bias").unwrap()[[0, 0]] = f64::NAN;
        let (action, source) = inputs(&cfg, 15);
        let err = predict(&store, &cfg, &action, &source, &block_at(0, 0)).unwrap_err();
        assert!(err.to_string().contains("predictor block 1"), "{err}");
    }

    #[test]
    fn prediction_loss_examples() {
        let t = normal_matrix(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(prediction_loss(&t, &t).unwrap(), 0.0);
        let mut off = t.clone();
        off[[2, 5]] += 1.0;
        assert!((prediction_loss(&off, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(prediction_loss(&t, &Matrix::zeros((3, 8))).is_err());
    }

    #[test]
    fn prediction_loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = normal_matrix(3, 4, 1.0, &mut rng);
            let b = normal_matrix(3, 4, 1.0, &mut rng);
            let mut expected = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    expected += (a[[i, j]] - b[[i, j]]).powi(2);
                }
            }
            assert!((prediction_loss(&a, &b).unwrap() - expected).abs() < 1e-12);
        }
    }
}
