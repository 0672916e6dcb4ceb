//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in the graph is a 2-D matrix; scalars are `1×1`. A [`Graph`] is
//! built fresh for each forward pass and discarded afterwards. Leaves created
//! with [`Graph::parameter`] receive gradients, leaves created with
//! [`Graph::constant`] never do, and gradients only propagate through nodes
//! that depend on at least one parameter.

use ndarray::{concatenate, s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    SquaredDistance(Var, Var),
    DiagCrossEntropy(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_stats(x: &Matrix, eps: f64) -> Vec<(f64, f64)> {
    x.rows()
        .into_iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            (mean, (var + eps).sqrt())
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn parameter(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::SquaredDistance(a, b) => self.needs_grad(*a) || self.needs_grad(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::NormalizeRows(a)
            | Op::SliceCols(a, _, _)
            | Op::SelectRows(a, _)
            | Op::MeanRows(a)
            | Op::DiagCrossEntropy(a) => self.needs_grad(*a),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
                parts.iter().any(|p| self.needs_grad(*p))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: gain must be a single row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a) * c;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let stats = row_stats(x, eps);
        let mut v = x.clone();
        for (mut row, (mean, std)) in v.rows_mut().into_iter().zip(stats) {
            row.mapv_inplace(|x| (x - mean) / std);
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::NormalizeRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column count mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row count mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    /// Mean over rows, producing a single `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// `Σ (a − b)²` as a `1×1` node.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "squared_distance: shape mismatch");
        let d = self.value(a) - self.value(b);
        let v = Matrix::from_elem((1, 1), d.iter().map(|x| x * x).sum());
        self.push(v, Op::SquaredDistance(a, b))
    }

    /// Mean cross-entropy of a square logit matrix whose matching class for
    /// row `i` is column `i`.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Var {
        let x = self.value(logits);
        let n = x.nrows();
        assert_eq!(n, x.ncols(), "diag_cross_entropy: logits must be square");
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            total += lse - row[i];
        }
        let v = Matrix::from_elem((1, 1), total / n as f64);
        self.push(v, Op::DiagCrossEntropy(logits))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.needs_grad(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if self.needs_grad(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                if self.needs_grad(*a) {
                    acc(*a, g * val(*row));
                }
                if self.needs_grad(*row) {
                    acc(*row, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[[0, 0]];
                if self.needs_grad(*a) {
                    acc(*a, g * c);
                }
                if self.needs_grad(*s) {
                    let d = (g * val(*a)).sum();
                    acc(*s, Matrix::from_elem((1, 1), d));
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Gelu(a) => acc(*a, g * &val(*a).mapv(gelu_grad)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * s);
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let stats = row_stats(x, *eps);
                let mut d = Matrix::zeros(x.dim());
                let n = x.ncols() as f64;
                for (i, (_, std)) in stats.into_iter().enumerate() {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let gmean = gr.sum() / n;
                    let gy = gr.dot(&yr) / n;
                    let mut dr = d.row_mut(i);
                    for j in 0..x.ncols() {
                        dr[j] = (gr[j] - gmean - yr[j] * gy) / std;
                    }
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let norm = xr.dot(&xr).sqrt().max(f64::MIN_POSITIVE);
                    let gy = g.row(i).dot(&y.row(i));
                    let mut dr = d.row_mut(i);
                    for j in 0..x.ncols() {
                        dr[j] = (g[[i, j]] - y[[i, j]] * gy) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).nrows();
                    if self.needs_grad(*p) {
                        acc(*p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = val(*p).ncols();
                    if self.needs_grad(*p) {
                        acc(*p, g.slice(s![.., offset..offset + cols]).to_owned());
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                let mut d = Matrix::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + *len]).assign(g);
                acc(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = d.row_mut(r);
                    dr += &g.row(i);
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.nrows() as f64;
                let row = g.row(0).mapv(|v| v / n);
                let d = row.broadcast(x.dim()).expect("broadcast").to_owned();
                acc(*a, d);
            }
            Op::SquaredDistance(a, b) => {
                let c = 2.0 * g[[0, 0]];
                let diff = (val(*a) - val(*b)) * c;
                if self.needs_grad(*b) {
                    acc(*b, -&diff);
                }
                acc(*a, diff);
            }
            Op::DiagCrossEntropy(a) => {
                let x = val(*a);
                let n = x.nrows();
                let mut d = softmax_rows(x);
                for i in 0..n {
                    d[[i, i]] -= 1.0;
                }
                d *= g[[0, 0]] / n as f64;
                acc(*a, d);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when no path exists.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            out[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(x0: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |x: &Matrix| {
            let mut g = Graph::new();
            let v = g.parameter(x.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.parameter(x0.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).get_or_zeros(v, x0.dim());
        let numeric = numeric_grad(&x0, eval);
        let err = (&analytic - &numeric).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        let scale = numeric.mapv(f64::abs).fold(1e-8f64, |a, &b| a.max(b));
        assert!(err / scale < 1e-6, "analytic {analytic:?} numeric {numeric:?}");
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    fn weights() -> Matrix {
        array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.9]]
    }

    #[test]
    fn matmul_and_bias() {
        check(sample(), |g, x| {
            let w = g.constant(weights());
            let b = g.constant(array![[0.1, -0.2]]);
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let t = g.constant(Matrix::zeros((2, 2)));
            g.squared_distance(y, t)
        });
    }

    #[test]
    fn weight_side_of_matmul_t() {
        check(weights(), |g, w| {
            let x = g.constant(array![[0.3, -1.2], [1.1, 0.4], [0.2, 0.2]]);
            let y = g.matmul_t(x, w);
            let t = g.tanh(y);
            let m = g.mean_rows(t);
            let zero = g.constant(Matrix::zeros((1, 3)));
            g.squared_distance(m, zero)
        });
    }

    #[test]
    fn softmax_layer_norm_gelu() {
        check(sample(), |g, x| {
            let n = g.layer_norm_rows(x, 1e-5);
            let a = g.gelu(n);
            let s = g.softmax_rows(a);
            let t = g.constant(array![[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]]);
            g.squared_distance(s, t)
        });
    }

    #[test]
    fn normalize_and_cross_entropy() {
        check(sample(), |g, x| {
            let n = g.normalize_rows(x);
            let other = g.constant(array![[0.5, 0.5, -0.1], [0.3, -0.8, 0.2]]);
            let other = g.normalize_rows(other);
            let logits = g.matmul_t(n, other);
            let logits = g.scale(logits, 3.0);
            let a = g.diag_cross_entropy(logits);
            let tr = g.transpose(logits);
            let b = g.diag_cross_entropy(tr);
            g.add(a, b)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(), |g, x| {
            let left = g.slice_cols(x, 0, 2);
            let right = g.slice_cols(x, 1, 2);
            let cat = g.concat_cols(&[left, right]);
            let rows = g.select_rows(cat, &[1, 0, 1]);
            let stacked = g.concat_rows(&[rows, cat]);
            let gain = g.constant(array![[0.5, -1.0, 2.0, 0.1]]);
            let y = g.mul_row(stacked, gain);
            let zero = g.constant(Matrix::zeros(y_shape(g, y)));
            g.squared_distance(y, zero)
        });
    }

    fn y_shape(g: &Graph, v: Var) -> (usize, usize) {
        g.shape(v)
    }

    #[test]
    fn scalar_gate() {
        check(array![[0.35]], |g, s| {
            let gate = g.tanh(s);
            let x = g.constant(sample());
            let y = g.scale_by(x, gate);
            let t = g.constant(Matrix::ones((2, 3)));
            g.squared_distance(y, t)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(sample());
        let p = g.parameter(sample());
        let d = g.squared_distance(c, p);
        let grads = g.backward(d);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
