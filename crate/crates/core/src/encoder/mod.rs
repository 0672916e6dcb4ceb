//! Frozen dual-encoder boundary.
//!
//! The vision side turns an image into one global vector plus a grid of patch
//! vectors; the text side turns token sequences into per-token embeddings and
//! a summary vector, and accepts a continuous pseudo-token at a placeholder
//! slot. Encoder weights never change after construction. Text encoding of an
//! injected pseudo-token runs on the autodiff tape so gradients reach the
//! pseudo-token while the encoder itself stays constant.

mod tokenizer;
mod toy;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::view_forge::Raster;

pub use tokenizer::{TokenId, Tokenizer, PLACEHOLDER, UNK};
pub use toy::ToyDualEncoder;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub name: String,
    /// Shared embedding width `d`.
    pub feature_dim: usize,
    /// Patch grid side `g`; the encoder emits `g² + 1` visual vectors.
    pub grid: usize,
    /// Square input resolution in pixels.
    pub image_size: u32,
    pub max_text_len: usize,
    pub text_heads: usize,
    pub seed: u64,
}

impl EncoderProfile {
    pub fn toy(seed: u64) -> Self {
        Self {
            name: "toy".into(),
            feature_dim: 32,
            grid: 4,
            image_size: 64,
            max_text_len: 32,
            text_heads: 4,
            seed,
        }
    }

    /// Feature layout of a ViT-L/14 backbone at 224px.
    pub fn vit_l_14() -> Self {
        Self {
            name: "vit-l-14".into(),
            feature_dim: 1024,
            grid: 16,
            image_size: 224,
            max_text_len: 77,
            text_heads: 16,
            seed: 0,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(seed)),
            "vit-l-14" => Ok(Self {
                seed,
                ..Self::vit_l_14()
            }),
            other => Err(Error::InvalidInput(format!(
                "unknown encoder profile `{other}` (expected `toy` or `vit-l-14`)"
            ))),
        }
    }

    /// Number of visual vectors, global included.
    pub fn tokens(&self) -> usize {
        self.grid * self.grid + 1
    }

    pub fn patch_size(&self) -> u32 {
        self.image_size / self.grid as u32
    }

    /// Encoders are frozen by construction.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || !self.image_size.is_multiple_of(self.grid as u32) {
            return Err(Error::InvalidInput(format!(
                "image size {} is not divisible into a {}x{} patch grid",
                self.image_size, self.grid, self.grid
            )));
        }
        if self.feature_dim == 0 || self.text_heads == 0 || !self.feature_dim.is_multiple_of(self.text_heads) {
            return Err(Error::InvalidInput(format!(
                "text heads {} must divide feature dim {}",
                self.text_heads, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Global feature plus row-major patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub global: Array1<f64>,
    /// `g² × d`
    pub patches: Matrix,
    pub grid: usize,
}

impl VisualFeatures {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn is_finite(&self) -> bool {
        self.global.iter().chain(self.patches.iter()).all(|v| v.is_finite())
    }
}

/// Sentence summary vector of an action text.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEmbedding(pub Array1<f64>);

/// Continuous word embedding that stands in for the reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoToken(pub Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// One row per token.
    pub token_embeddings: Matrix,
    pub cls: ActionEmbedding,
}

/// Token ids with exactly one placeholder slot and an optional injected
/// pseudo-token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    tokens: Vec<TokenId>,
    slot: usize,
    injected: Option<PseudoToken>,
}

impl PromptSequence {
    pub fn new(tokens: Vec<TokenId>, placeholder: TokenId) -> Result<Self> {
        let slots: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == placeholder)
            .map(|(i, _)| i)
            .collect();
        match slots.as_slice() {
            [slot] => Ok(Self {
                slot: *slot,
                tokens,
                injected: None,
            }),
            _ => Err(Error::Template(format!(
                "prompt must contain exactly one {PLACEHOLDER} placeholder, found {}",
                slots.len()
            ))),
        }
    }

    pub fn from_text(tokenizer: &Tokenizer, text: &str) -> Result<Self> {
        Self::new(tokenizer.encode(text)?, tokenizer.placeholder_id())
    }

    pub fn inject(mut self, token: PseudoToken) -> Self {
        self.injected = Some(token);
        self
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn injected(&self) -> Option<&PseudoToken> {
        self.injected.as_ref()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Contract shared by the toy encoders and adapters for pretrained weights.
pub trait FrozenDualEncoder: Send + Sync {
    fn profile(&self) -> &EncoderProfile;

    fn tokenizer(&self) -> &Tokenizer;

    /// Encodes an image already at the profile resolution.
    fn encode_image(&self, image: &Raster) -> Result<VisualFeatures>;

    fn encode_text(&self, text: &str) -> Result<TextEncoding>;

    /// Records the prompt encoding on `g` with `pseudo` (a `1×d` node) at the
    /// placeholder slot and returns the `1×d` sentence embedding node.
    fn encode_prompt_on(&self, g: &mut Graph, seq: &PromptSequence, pseudo: Var) -> Result<Var>;

    /// Digest of all encoder weights.
    fn checksum(&self) -> String;

    fn encode_prompt(&self, seq: &PromptSequence) -> Result<Array1<f64>> {
        let token = seq
            .injected()
            .ok_or_else(|| Error::Template("prompt placeholder was never filled".into()))?;
        let mut g = Graph::new();
        let pseudo = g.constant(token.0.clone().insert_axis(ndarray::Axis(0)));
        let out = self.encode_prompt_on(&mut g, seq, pseudo)?;
        Ok(g.value(out).row(0).to_owned())
    }

    /// Resizes to the profile resolution when needed, then encodes.
    fn encode_image_any(&self, image: &Raster) -> Result<VisualFeatures> {
        let size = self.profile().image_size;
        if image.dimensions() == (size, size) {
            self.encode_image(image)
        } else {
            self.encode_image(&resize(image, size))
        }
    }
}

/// Bilinear resize to a square `size × size` raster.
pub fn resize(image: &Raster, size: u32) -> Raster {
    image::imageops::resize(image, size, size, image::imageops::FilterType::Triangle)
}
