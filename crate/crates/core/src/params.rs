//! Named parameter storage and the small layer vocabulary shared by the
//! predictor and the fusion heads.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};

/// Whether a parameter participates in decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Apply,
    Exempt,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Matrix,
    pub decay: Decay,
}

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, decay: Decay) {
        self.entries.insert(name.into(), ParamEntry { value, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            h.update((e.value.nrows() as u64).to_le_bytes());
            h.update((e.value.ncols() as u64).to_le_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Registers every parameter as a graph leaf. With `trainable == false`
    /// the leaves are constants and no gradient is tracked.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let v = if trainable {
                    g.parameter(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A matrix of i.i.d. `N(0, std²)` entries.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Registers `{prefix}.weight` (fan-in scaled) and a zero `{prefix}.bias`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        normal_matrix(fan_in, fan_out, std, rng),
        Decay::Apply,
    );
    store.insert(
        format!("{prefix}.bias"),
        Matrix::zeros((1, fan_out)),
        Decay::Exempt,
    );
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gain"), Matrix::ones((1, width)), Decay::Exempt);
    store.insert(format!("{prefix}.bias"), Matrix::zeros((1, width)), Decay::Exempt);
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    let n = g.layer_norm_rows(x, LN_EPS);
    let y = g.mul_row(n, gain);
    Ok(g.add_row(y, bias))
}

/// Three linear layers with GELU between them.
pub(crate) fn init_mlp3(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut impl Rng,
) {
    init_linear(store, &format!("{prefix}.0"), input, hidden, rng);
    init_linear(store, &format!("{prefix}.1"), hidden, hidden, rng);
    init_linear(store, &format!("{prefix}.2"), hidden, output, rng);
}

pub(crate) fn mlp3(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.0"), x)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.1"), h)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.2"), h)
}
