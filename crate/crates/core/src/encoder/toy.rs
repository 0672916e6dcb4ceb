use std::path::Path;

use indexmap::IndexMap;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    EncoderProfile, FrozenDualEncoder, PromptSequence, TextEncoding, Tokenizer, VisualFeatures,
};
use crate::archive::{read_archive, write_archive, Archive};
use crate::autograd::{gelu, Graph, Matrix, Var};
use crate::encoder::ActionEmbedding;
use crate::error::{Error, Result};
use crate::params::normal_matrix;
use crate::view_forge::Raster;

const FORMAT: &str = "pcir-encoder";

/// Template and function words carry little content, so their embeddings are
/// shrunk and sentence summaries are dominated by content words.
const FUNCTION_WORDS: [&str; 12] = ["a", "on", "photo", "of", ",", "and", "the", "with", "in", "is", "to", super::PLACEHOLDER];
const FUNCTION_WORD_SCALE: f64 = 0.03;

/// Seeded stand-in for a pretrained dual encoder.
///
/// Vision: non-overlapping patches are flattened, projected to `d`, and passed
/// through one token-mixing layer; the global vector is a projection of the
/// mean patch feature. Text: embedding table plus positions, one multi-head
/// self-attention layer with a residual, and the normalized mean token row
/// projected as the sentence summary.
#[derive(Debug, Clone)]
pub struct ToyDualEncoder {
    profile: EncoderProfile,
    tokenizer: Tokenizer,
    weights: IndexMap<String, Matrix>,
}

fn weight_shapes(p: &EncoderProfile, vocab: usize) -> Vec<(&'static str, (usize, usize))> {
    let d = p.feature_dim;
    let ps = p.patch_size() as usize;
    let cells = p.grid * p.grid;
    vec![
        ("vision.patch_proj", (3 * ps * ps, d)),
        ("vision.mix", (cells, cells)),
        ("vision.global_proj", (d, d)),
        ("text.token_embed", (vocab, d)),
        ("text.position", (p.max_text_len, d)),
        ("text.query", (d, d)),
        ("text.key", (d, d)),
        ("text.value", (d, d)),
        ("text.output", (d, d)),
        ("text.summary_proj", (d, d)),
    ]
}

impl ToyDualEncoder {
    pub fn new(profile: EncoderProfile) -> Result<Self> {
        profile.validate()?;
        let tokenizer = Tokenizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        let mut weights: IndexMap<String, Matrix> = weight_shapes(&profile, tokenizer.vocab_size())
            .into_iter()
            .map(|(name, (rows, cols))| {
                let std = match name {
                    "text.token_embed" => 0.02,
                    "text.position" => 0.003,
                    _ => 1.0 / (rows as f64).sqrt(),
                };
                (name.to_string(), normal_matrix(rows, cols, std, &mut rng))
            })
            .collect();
        let table = weights.get_mut("text.token_embed").expect("declared above");
        for word in FUNCTION_WORDS {
            table.row_mut(tokenizer.id(word) as usize).mapv_inplace(|v| v * FUNCTION_WORD_SCALE);
        }
        Ok(Self {
            profile,
            tokenizer,
            weights,
        })
    }

    pub fn toy(seed: u64) -> Self {
        Self::new(EncoderProfile::toy(seed)).expect("toy profile is valid")
    }

    fn w(&self, name: &str) -> &Matrix {
        &self.weights[name]
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::default();
        for (name, m) in &self.weights {
            archive.arrays.insert(name.clone(), m.clone());
        }
        archive.metadata.insert("format".into(), FORMAT.into());
        archive.metadata.insert(
            "profile".into(),
            serde_json::to_string(&self.profile).expect("profile serializes"),
        );
        write_archive(path, &archive)
    }

    /// Loads externally supplied weights; every array must match the shapes
    /// implied by the stored profile.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        if archive.meta("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("{} is not an encoder archive", path.display())));
        }
        let profile: EncoderProfile = serde_json::from_str(archive.meta("profile")?)
            .map_err(|e| Error::Checkpoint(format!("encoder profile: {e}")))?;
        profile.validate()?;
        let tokenizer = Tokenizer::default();
        let mut weights = IndexMap::new();
        for (name, shape) in weight_shapes(&profile, tokenizer.vocab_size()) {
            let m = archive.array(name)?;
            if m.dim() != shape {
                return Err(Error::shape("encoder weights", format!("{name} {shape:?}"), format!("{:?}", m.dim())));
            }
            weights.insert(name.to_string(), m.clone());
        }
        Ok(Self {
            profile,
            tokenizer,
            weights,
        })
    }

    fn flatten_patches(&self, image: &Raster) -> Matrix {
        let g = self.profile.grid;
        let ps = self.profile.patch_size() as usize;
        let mut out = Matrix::zeros((g * g, 3 * ps * ps));
        for (r, c) in (0..g).flat_map(|r| (0..g).map(move |c| (r, c))) {
            let mut row = out.row_mut(r * g + c);
            let mut k = 0;
            for py in 0..ps {
                for px in 0..ps {
                    let p = image.get_pixel((c * ps + px) as u32, (r * ps + py) as u32).0;
                    for ch in p {
                        row[k] = ch as f64 - 0.5;
                        k += 1;
                    }
                }
            }
        }
        out
    }

    /// Self-attention text layer over pre-assembled token rows `x` (`n×d`).
    fn text_layer(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let (n, d) = g.shape(x);
        if n > self.profile.max_text_len {
            return Err(Error::InvalidInput(format!(
                "text of {n} tokens exceeds the {} token limit",
                self.profile.max_text_len
            )));
        }
        let pos = g.constant(self.w("text.position").slice(ndarray::s![0..n, ..]).to_owned());
        let x = g.add(x, pos);
        let wq = g.constant(self.w("text.query").clone());
        let wk = g.constant(self.w("text.key").clone());
        let wv = g.constant(self.w("text.value").clone());
        let wo = g.constant(self.w("text.output").clone());
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let heads = self.profile.text_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&outs);
        let mixed = g.matmul(cat, wo);
        let hidden = g.add(x, mixed);
        let pooled = g.mean_rows(hidden);
        let pooled = g.layer_norm_rows(pooled, 1e-5);
        let proj = g.constant(self.w("text.summary_proj").clone());
        let cls = g.matmul(pooled, proj);
        Ok((hidden, cls))
    }

    fn embed_rows(&self, ids: &[u32]) -> Matrix {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.w("text.token_embed").select(Axis(0), &rows)
    }
}

impl FrozenDualEncoder for ToyDualEncoder {
    fn profile(&self) -> &EncoderProfile {
        &self.profile
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn encode_image(&self, image: &Raster) -> Result<VisualFeatures> {
        let size = self.profile.image_size;
        if image.dimensions() != (size, size) {
            let (w, h) = image.dimensions();
            return Err(Error::shape(
                "encode_image",
                format!(
                    "{size}x{size} image ({g}x{g} grid of {p}px patches)",
                    g = self.profile.grid,
                    p = self.profile.patch_size()
                ),
                format!("{w}x{h}"),
            ));
        }
        let flat = self.flatten_patches(image);
        let proj = flat.dot(self.w("vision.patch_proj"));
        let mixed = self.w("vision.mix").dot(&proj).mapv(gelu);
        let patches = proj + mixed;
        let mean = patches.mean_axis(Axis(0)).expect("non-empty grid");
        let global = mean.dot(self.w("vision.global_proj"));
        let feats = VisualFeatures {
            global,
            patches,
            grid: self.profile.grid,
        };
        if !feats.is_finite() {
            return Err(Error::NonFinite {
                context: "vision encoder output".into(),
            });
        }
        Ok(feats)
    }

    fn encode_text(&self, text: &str) -> Result<TextEncoding> {
        let mut ids = self.tokenizer.encode(text)?;
        ids.truncate(self.profile.max_text_len);
        let mut g = Graph::new();
        let x = g.constant(self.embed_rows(&ids));
        let (hidden, cls) = self.text_layer(&mut g, x)?;
        Ok(TextEncoding {
            token_embeddings: g.value(hidden).clone(),
            cls: ActionEmbedding(g.value(cls).row(0).to_owned()),
        })
    }

    fn encode_prompt_on(&self, g: &mut Graph, seq: &PromptSequence, pseudo: Var) -> Result<Var> {
        let d = self.profile.feature_dim;
        if g.shape(pseudo) != (1, d) {
            return Err(Error::shape("encode_prompt", format!("1x{d}"), format!("{:?}", g.shape(pseudo))));
        }
        let tokens = seq.tokens();
        let slot = seq.slot();
        let mut parts = Vec::with_capacity(3);
        if slot > 0 {
            parts.push(g.constant(self.embed_rows(&tokens[..slot])));
        }
        parts.push(pseudo);
        if slot + 1 < tokens.len() {
            parts.push(g.constant(self.embed_rows(&tokens[slot + 1..])));
        }
        let x = g.concat_rows(&parts);
        let (_, cls) = self.text_layer(g, x)?;
        Ok(cls)
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.weights {
            h.update(name.as_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PseudoToken;
    use ndarray::Array1;
    use crate::view_forge::synth::{all_scenes, synth_dataset, SynthConfig};

    fn encoder() -> ToyDualEncoder {
        ToyDualEncoder::toy(7)
    }

    fn image(seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_dataset(1, &SynthConfig::default(), &mut rng).remove(0).image
    }

    #[test]
    fn image_features_are_deterministic_with_toy_shapes() {
        let enc = encoder();
        let img = image(0);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patches.dim(), (16, 32));
        assert_eq!(a.global.len(), 32);
    }

    #[test]
    fn wrong_resolution_names_expected_grid() {
        let err = encoder().encode_image(&Raster::new(48, 64)).unwrap_err().to_string();
        assert!(err.contains("4x4 grid"), "{err}");
    }

    #[test]
    fn full_scale_profile_layout() {
        let p = EncoderProfile::vit_l_14();
        assert_eq!(p.tokens(), 257);
        assert_eq!(p.feature_dim, 1024);
        let enc = ToyDualEncoder::new(p).unwrap();
        let feats = enc.encode_image(&Raster::new(224, 224)).unwrap();
        assert_eq!(feats.patches.dim(), (256, 1024));
        assert_eq!(feats.global.len(), 1024);
    }

    #[test]
    fn text_encoding_is_deterministic_and_sized() {
        let enc = encoder();
        let a = enc.encode_text("a red circle on a green field").unwrap();
        let b = enc.encode_text("a red circle on a green field").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cls.0.len(), enc.profile().feature_dim);
        assert_eq!(a.token_embeddings.nrows(), 7);
        assert!(enc.encode_text("").is_err());
    }

    #[test]
    fn synthetic_captions_never_collide() {
        let enc = encoder();
        let vecs: Vec<_> = all_scenes()
            .iter()
            .map(|s| enc.encode_text(&s.caption()).unwrap().cls.0)
            .collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                assert!(vecs[i] != vecs[j], "captions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn injection_changes_sentence_embedding() {
        let enc = encoder();
        let seq = PromptSequence::from_text(enc.tokenizer(), "a photo of [*]").unwrap();
        let zero = PseudoToken(Array1::zeros(32));
        let mut one_hot = Array1::zeros(32);
        one_hot[0] = 1.0;
        let a = enc.encode_prompt(&seq.clone().inject(zero.clone())).unwrap();
        let b = enc.encode_prompt(&seq.clone().inject(PseudoToken(one_hot))).unwrap();
        let a2 = enc.encode_prompt(&seq.clone().inject(zero)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
        assert!(enc.encode_prompt(&seq).is_err(), "unfilled placeholder");
    }

    #[test]
    fn prompt_jacobian_matches_finite_differences() {
        let enc = encoder();
        let seq = PromptSequence::from_text(enc.tokenizer(), "a photo of [*]").unwrap();
        let s0 = Array1::from_shape_fn(32, |i| ((i as f64) * 0.37).sin());
        let dir = Array1::from_shape_fn(32, |i| ((i as f64) * 1.3).cos());
        let weights = Array1::from_shape_fn(32, |i| 1.0 + (i % 3) as f64);

        // Analytic J·v via the gradient of <w, t_p(s)> along dir.
        let mut g = Graph::new();
        let s = g.parameter(s0.clone().insert_axis(Axis(0)));
        let t = enc.encode_prompt_on(&mut g, &seq, s).unwrap();
        let wv = g.constant(weights.clone().insert_axis(Axis(0)));
        let prod = g.mul_row(t, wv);
        let zero = g.constant(Matrix::zeros((1, 32)));
        let half_sq = g.squared_distance(prod, zero);
        let grad = g.backward(half_sq).get(s).unwrap().row(0).dot(&dir);

        let f = |x: &Array1<f64>| {
            let t = enc.encode_prompt(&seq.clone().inject(PseudoToken(x.clone()))).unwrap();
            (&t * &weights).mapv(|v| v * v).sum()
        };
        let h = 1e-6;
        let numeric = (f(&(&s0 + &(&dir * h))) - f(&(&s0 - &(&dir * h)))) / (2.0 * h);
        let rel = (grad - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-4, "analytic {grad} numeric {numeric}");
    }

    #[test]
    fn weights_round_trip_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let enc = encoder();
        enc.save(&path).unwrap();
        let back = ToyDualEncoder::load(&path).unwrap();
        assert_eq!(back.checksum(), enc.checksum());
        assert_eq!(back.profile(), enc.profile());
    }
}
