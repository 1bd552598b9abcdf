//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Graphs are built fresh for every forward pass and dropped
//! afterwards. Parameters enter the tape as leaves via [`Graph::param`], and
//! gradients are read back per [`ParamStore`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<Option<usize>>),
    Sum(Var),
    MeanRows(Var),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// A training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        let mut g = Self::new();
        g.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.input(m)
    }

    /// Bind a parameter as a leaf. Repeated calls for the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(key, v);
        v
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

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a single row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Row-wise softmax. With a `visible` mask (row-major, same shape as
    /// `a`), hidden entries are treated as −∞ logits and get exactly zero
    /// weight. Every row must have at least one visible entry.
    pub fn softmax_rows(&mut self, a: Var, visible: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if let Some(mask) = visible {
            assert_eq!(mask.len(), rows * cols, "mask shape mismatch");
        }
        let mut out = Array2::<f64>::zeros((rows, cols));
        for r in 0..rows {
            let seen = |c: usize| visible.is_none_or(|m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if seen(c) {
                    max = max.max(x[[r, c]]);
                }
            }
            assert!(max.is_finite(), "softmax row {r} has no visible entry");
            let mut total = 0.0;
            for c in 0..cols {
                if seen(c) {
                    let e = (x[[r, c]] - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / total);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut xhat = Array2::<f64>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let value = xhat.clone();
        self.push(value, Op::LayerNorm { x: a, xhat, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("concat_cols row mismatch")
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let cols = x.ncols();
        let mut out = Array2::<f64>::zeros((index.len(), cols));
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).assign(&x.row(src));
        }
        self.push(out, Op::GatherRows(a, index.to_vec()))
    }

    /// General re-indexing: output element `k` (row-major in a
    /// `rows × cols` result) is the input's row-major element `index[k]`, or
    /// zero for `None`.
    pub fn gather_flat(&mut self, a: Var, rows: usize, cols: usize, index: Vec<Option<usize>>) -> Var {
        assert_eq!(index.len(), rows * cols);
        let x = self.value(a).as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let data: Vec<f64> = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        self.push(v, Op::GatherFlat(a, index))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Inverted dropout; identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let n = self.nodes[a.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let mut v = x.clone();
        for (o, m) in v.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(v, Op::Dropout(a, mask))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(val(*b)));
                accumulate(grads, *b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                accumulate(grads, *a, g * val(*row));
                let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *row, gr);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= 2.0 * x);
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= sign(x));
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut d = g * p;
                for r in 0..p.nrows() {
                    let dot: f64 = d.row(r).sum();
                    for c in 0..p.ncols() {
                        d[[r, c]] -= p[[r, c]] * dot;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (rows, cols) = xhat.dim();
                let n = cols as f64;
                let mut d = Array2::<f64>::zeros((rows, cols));
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gx = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        d[[r, c]] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).nrows();
                    accumulate(grads, p, g.slice(s![start..start + len, ..]).to_owned());
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).ncols();
                    accumulate(grads, p, g.slice(s![.., start..start + len]).to_owned());
                    start += len;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::<f64>::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::<f64>::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, index) => {
                let mut d = Array2::<f64>::zeros(val(*a).dim());
                for (i, &src) in index.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                accumulate(grads, *a, d);
            }
            Op::GatherFlat(a, index) => {
                let mut d = Array2::<f64>::zeros(val(*a).dim());
                {
                    let ds = d.as_slice_mut().expect("standard layout");
                    for (k, gi) in g.iter().enumerate() {
                        if let Some(i) = index[k] {
                            ds[i] += gi;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                accumulate(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = val(*a).dim();
                let row = g / rows as f64;
                let d = row.broadcast((rows, cols)).expect("broadcast").to_owned();
                accumulate(grads, *a, d);
            }
            Op::Dropout(a, mask) => {
                let mut d = g.clone();
                for (o, m) in d.iter_mut().zip(mask) {
                    *o *= m;
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `store` that took part in the
    /// graph, indexed by parameter id (`None` for untouched parameters).
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Mat>> {
        (0..store.len())
            .map(|i| graph.params.get(&(store.tag(), i)).and_then(|&v| self.get(v)).cloned())
            .collect()
    }
}
