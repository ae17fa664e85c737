//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and are referenced, not copied, by the graph; calling
//! [`Graph::backward`] returns gradients for every parameter that took part
//! in the computation.
//!
//! The op set is deliberately narrow: just what the encoder, the option
//! inference network and the decoder need. A few ops are fused (layer norm,
//! trilinear scores, the phrasal matrix) because their hand-written
//! backward passes are far cheaper than composing primitives.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, softmax_in_place, Matrix};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, shaped parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(value);
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which key positions a softmax row may attend to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnMask {
    /// `false` marks a PAD key column. `None` means every column is valid.
    pub key_valid: Option<Vec<bool>>,
    /// Row `i` may only see columns `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self { key_valid: None, causal: true }
    }

    pub fn keys(valid: Vec<bool>) -> Self {
        Self { key_valid: Some(valid), causal: false }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|v| v[j])
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowDot(Var, Var),
    Trilinear(Var, Var, Var),
    ColMax(Var, Vec<usize>),
    SymMean(Vec<Var>),
    CrossEntropy(Var, Vec<usize>, Matrix),
    Sum(Var),
    LogLinks(Var),
    Phrasal(Var, usize),
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Gradients still flow to it and can be read back.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies row `i` of `a` by the scalar `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects a single column");
        assert_eq!(av.rows(), cv.rows(), "mul_col height mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv[(r, 0)];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).map(|x| mul * x + add);
        self.push(out, Op::Affine(a, mul))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row-wise softmax. Masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: AttnMask) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i), |j| mask.allows(i, j));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with a learned `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Stacks along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&values);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&values);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let out = self.value(a).slice_rows(start, count);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice_cols(start, width);
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row-wise dot products of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let out = Matrix::from_vec(av.rows(), 1, (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect());
        self.push(out, Op::RowDot(a, b))
    }

    /// Trilinear scores `s_ij = wᵀ[a_i ; b_j ; a_i ⊙ b_j]` for a `1 × 3d` weight.
    pub fn trilinear(&mut self, a: Var, b: Var, w: Var) -> Var {
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        let d = av.cols();
        assert_eq!(bv.cols(), d, "trilinear width mismatch");
        assert_eq!(wv.shape(), (1, 3 * d), "trilinear weight must be 1 x 3d");
        let wr = wv.row(0);
        let (w1, w2, w3) = (&wr[..d], &wr[d..2 * d], &wr[2 * d..]);
        let a_terms: Vec<f64> = (0..av.rows()).map(|i| dot(av.row(i), w1)).collect();
        let b_terms: Vec<f64> = (0..bv.rows()).map(|j| dot(bv.row(j), w2)).collect();
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        let mut aw = vec![0.0; d];
        for i in 0..av.rows() {
            for ((o, x), y) in aw.iter_mut().zip(av.row(i)).zip(w3) {
                *o = x * y;
            }
            for j in 0..bv.rows() {
                out[(i, j)] = a_terms[i] + b_terms[j] + dot(&aw, bv.row(j));
            }
        }
        self.push(out, Op::Trilinear(a, b, w))
    }

    /// Column-wise maximum over rows, as a `1 × c` row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.rows() > 0, "col_max of an empty matrix");
        let mut out = Matrix::zeros(1, av.cols());
        let mut arg = vec![0; av.cols()];
        for c in 0..av.cols() {
            let mut best = av[(0, c)];
            for r in 1..av.rows() {
                if av[(r, c)] > best {
                    best = av[(r, c)];
                    arg[c] = r;
                }
            }
            out[(0, c)] = best;
        }
        self.push(out, Op::ColMax(a, arg))
    }

    /// Elementwise mean whose result does not depend on the order of
    /// `parts`: each element's addends are sorted before summation.
    pub fn symmetric_mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "symmetric_mean of nothing");
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let shape = values[0].shape();
        assert!(values.iter().all(|v| v.shape() == shape), "symmetric_mean shape mismatch");
        let count = values.len() as f64;
        let mut out = Matrix::zeros(shape.0, shape.1);
        let mut buf = Vec::with_capacity(values.len());
        for (idx, o) in out.as_mut_slice().iter_mut().enumerate() {
            buf.clear();
            buf.extend(values.iter().map(|v| v.as_slice()[idx]));
            buf.sort_by(f64::total_cmp);
            *o = buf.iter().sum::<f64>() / count;
        }
        self.push(out, Op::SymMean(parts.to_vec()))
    }

    /// Summed negative log-likelihood of `targets[r]` under the row softmax of
    /// `logits`. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r), |_| true);
        }
        self.push(Matrix::filled(1, 1, total), Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Log phrase-link strengths from bilinear neighbor scores.
    ///
    /// `scores` is an `(n−1) × 1` column with `scores[k] = f_kᵀ W_b f_{k+1}`.
    /// Each token softmaxes over its neighbors' scores (a token with one
    /// neighbor gives it probability 1), and the output is
    /// `ln P_k = ½ (ln pr_{k,k+1} + ln pr_{k+1,k})`.
    pub fn log_links(&mut self, scores: Var) -> Var {
        let r = self.value(scores).column(0);
        let out = log_link_values(&r);
        self.push(Matrix::column_vector(&out), Op::LogLinks(scores))
    }

    /// The `n × n` phrasal score matrix from an `(n−1) × 1` column of log link
    /// strengths. Only the first `valid` positions are real tokens; any entry
    /// touching a position at or beyond `valid` is 1.
    pub fn phrasal_matrix(&mut self, log_links: Var, valid: usize) -> Var {
        let ll = self.value(log_links).column(0);
        let out = phrasal_from_log_links(&ll, valid);
        self.push(out, Op::Phrasal(log_links, valid))
    }

    /// Runs the reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Gradients::zeros_like(self.store);
        for (pid, var) in self.param_nodes.iter().enumerate() {
            if let Some(v) = var {
                params.grads[pid] = grads[v.0].clone();
            }
        }
        Backward { nodes: grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul(self.value(*b));
                let gb = g.t_matmul(self.value(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv[(r, 0)];
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gc[(r, 0)] = dot(g.row(r), av.row(r));
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Affine(a, mul) => accumulate(grads, *a, g.scale(*mul)),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::SoftmaxRows(a) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let (n, d) = xhat.shape();
                let mut gx = Matrix::zeros(n, d);
                let mut gg = Matrix::zeros(1, d);
                let mut gb = Matrix::zeros(1, d);
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let dxhat: Vec<f64> = gr.iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dot(&dxhat, xh) / d as f64;
                    for c in 0..d {
                        gx[(r, c)] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        gg[(0, c)] += gr[c] * xh[c];
                        gb[(0, c)] += gr[c];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gb);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if rows > 0 {
                        accumulate(grads, *p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    accumulate(grads, *p, g.slice_cols(start, cols));
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = bv.clone();
                let mut gb = av.clone();
                for r in 0..av.rows() {
                    let s = g[(r, 0)];
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gb.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Trilinear(a, b, w) => {
                let (av, bv, wv) = (self.value(*a), self.value(*b), self.value(*w));
                let d = av.cols();
                let wr = wv.row(0);
                let (w1, w2, w3) = (&wr[..d], &wr[d..2 * d], &wr[2 * d..]);
                let row_sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                let col_sums: Vec<f64> = (0..g.cols()).map(|j| (0..g.rows()).map(|i| g[(i, j)]).sum()).collect();
                // G·b and Gᵀ·a feed the product term.
                let gb_prod = g.matmul(bv);
                let gt_a = g.t_matmul(av);
                let mut ga = Matrix::zeros(av.rows(), d);
                let mut gbm = Matrix::zeros(bv.rows(), d);
                let mut gw = Matrix::zeros(1, 3 * d);
                for i in 0..av.rows() {
                    for c in 0..d {
                        ga[(i, c)] = row_sums[i] * w1[c] + gb_prod[(i, c)] * w3[c];
                        gw[(0, c)] += row_sums[i] * av[(i, c)];
                        gw[(0, 2 * d + c)] += gb_prod[(i, c)] * av[(i, c)];
                    }
                }
                for j in 0..bv.rows() {
                    for c in 0..d {
                        gbm[(j, c)] = col_sums[j] * w2[c] + gt_a[(j, c)] * w3[c];
                        gw[(0, d + c)] += col_sums[j] * bv[(j, c)];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gbm);
                accumulate(grads, *w, gw);
            }
            Op::ColMax(a, arg) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga[(r, c)] = g[(0, c)];
                }
                accumulate(grads, *a, ga);
            }
            Op::SymMean(parts) => {
                let share = g.scale(1.0 / parts.len() as f64);
                for p in parts {
                    accumulate(grads, *p, share.clone());
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let s = g[(0, 0)];
                let mut gl = probs.scale(s);
                for (r, &t) in targets.iter().enumerate() {
                    gl[(r, t)] -= s;
                }
                accumulate(grads, *logits, gl);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g[(0, 0)]));
            }
            Op::LogLinks(scores) => {
                let r = self.value(*scores).column(0);
                let gr = log_links_backward(&r, &g.column(0));
                accumulate(grads, *scores, Matrix::column_vector(&gr));
            }
            Op::Phrasal(log_links, valid) => {
                let links = self.value(*log_links).rows();
                let gl = phrasal_backward(out, g, links, *valid);
                accumulate(grads, *log_links, Matrix::column_vector(&gl));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Backward {
    nodes: Vec<Option<Matrix>>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to any node, zero-shaped `None` if it did not
    /// influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
#[inline]
fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward pass of [`Graph::log_links`] on plain values.
pub(crate) fn log_link_values(scores: &[f64]) -> Vec<f64> {
    let links = scores.len();
    (0..links)
        .map(|k| {
            // Token k looks right; it also has a left neighbor unless k == 0.
            let right = if k == 0 { 0.0 } else { ln_sigmoid(scores[k] - scores[k - 1]) };
            // Token k + 1 looks left; it also has a right neighbor unless last.
            let left = if k + 1 == links { 0.0 } else { ln_sigmoid(scores[k] - scores[k + 1]) };
            0.5 * (right + left)
        })
        .collect()
}

fn log_links_backward(scores: &[f64], g: &[f64]) -> Vec<f64> {
    let links = scores.len();
    let mut out = vec![0.0; links];
    for k in 0..links {
        let half = 0.5 * g[k];
        if k > 0 {
            let s = sigmoid(-(scores[k] - scores[k - 1])) * half;
            out[k] += s;
            out[k - 1] -= s;
        }
        if k + 1 < links {
            let s = sigmoid(-(scores[k] - scores[k + 1])) * half;
            out[k] += s;
            out[k + 1] -= s;
        }
    }
    out
}

/// Forward pass of [`Graph::phrasal_matrix`] on plain values.
pub(crate) fn phrasal_from_log_links(log_links: &[f64], valid: usize) -> Matrix {
    let n = log_links.len() + 1;
    let mut p = Matrix::filled(n, n, 1.0);
    let valid = valid.min(n);
    for i in 0..valid {
        let mut acc = 0.0;
        for j in i + 1..valid {
            acc += log_links[j - 1];
            let v = acc.exp();
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    p
}

fn phrasal_backward(p: &Matrix, g: &Matrix, links: usize, valid: usize) -> Vec<f64> {
    let n = links + 1;
    let valid = valid.min(n);
    // S_ij (i < j) is the gradient reaching the shared log-sum of span (i, j);
    // link k receives the sum of S over spans with i <= k < j.
    let span = |i: usize, j: usize| g[(i, j)] * p[(i, j)] + g[(j, i)] * p[(j, i)];
    let mut out = vec![0.0; links];
    let mut running = 0.0;
    for k in 0..valid.saturating_sub(1) {
        for j in k + 1..valid {
            running += span(k, j);
        }
        for i in 0..k {
            running -= span(i, k);
        }
        out[k] = running;
    }
    out
}
