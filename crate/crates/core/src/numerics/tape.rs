//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological traversal. Parameters live outside the tape in a
//! [`ParamSet`]; [`Tape::param`] records a leaf that remembers which
//! parameter it came from, and [`Tape::backward`] returns one gradient per
//! registered parameter.
//!
//! Discrete choices (top-k selections, partitions) are made on values while
//! recording and are treated as constants by the reverse sweep.

use super::{Matrix, NumericsError};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddColBias(Var, Var),
    MulRowBroadcast(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Im2Col {
        x: Var,
        kernel: usize,
    },
    ConcatRows(Var, Var),
    GatherCols(Var, Vec<usize>),
    AssembleCols(Vec<(Var, Vec<usize>)>),
    ColNorms(Var),
    Sum(Var),
    TopKMeanRows {
        x: Var,
        picks: Vec<Vec<usize>>,
    },
    SoftmaxKl {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> NumericsError {
    NumericsError::Shape { op, left, right }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddColBias(a, b)
            | Op::MulRowBroadcast(a, b)
            | Op::ConcatRows(a, b) => self.requires(*a) || self.requires(*b),
            Op::Scale(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::GatherCols(a, _)
            | Op::ColNorms(a)
            | Op::Sum(a) => self.requires(*a),
            Op::Im2Col { x, .. } | Op::TopKMeanRows { x, .. } => self.requires(*x),
            Op::SoftmaxKl { logits, .. } => self.requires(*logits),
            Op::AssembleCols(parts) => parts.iter().any(|(v, _)| self.requires(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that carries no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// `x + b` where `b` is a column vector added to every column of `x`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape() != (xv.rows(), 1) {
            return Err(shape_err("add_col_bias", xv.shape(), bv.shape()));
        }
        let value = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| xv[(r, c)] + bv[(r, 0)]);
        Ok(self.push(value, Op::AddColBias(x, b)))
    }

    /// Scales column `t` of `x` by entry `t` of the row vector `r`.
    pub fn mul_row_broadcast(&mut self, x: Var, r: Var) -> Result<Var, NumericsError> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.shape() != (1, xv.cols()) {
            return Err(shape_err("mul_row_broadcast", xv.shape(), rv.shape()));
        }
        let value = Matrix::from_fn(xv.rows(), xv.cols(), |i, t| xv[(i, t)] * rv[(0, t)]);
        Ok(self.push(value, Op::MulRowBroadcast(x, r)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Unfolds a C×T sequence into (C·K)×T temporal patches, zero padded so
    /// that T is preserved. Row `c·K + k` of column `t` holds `x[c, t + k − K/2]`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var, NumericsError> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(NumericsError::Contract(format!(
                "temporal kernel span must be odd, got {kernel}"
            )));
        }
        let xv = self.value(x);
        let (c, t) = xv.shape();
        let pad = kernel / 2;
        let value = Matrix::from_fn(c * kernel, t, |row, col| {
            let (ch, k) = (row / kernel, row % kernel);
            let src = col as isize + k as isize - pad as isize;
            if src < 0 || src >= t as isize {
                0.0
            } else {
                xv[(ch, src as usize)]
            }
        });
        Ok(self.push(value, Op::Im2Col { x, kernel }))
    }

    /// Stacks `a` over `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.cols()) {
            return Err(NumericsError::Contract(format!(
                "column {bad} out of range for {} columns",
                xv.cols()
            )));
        }
        let value = xv.select_columns(cols);
        Ok(self.push(value, Op::GatherCols(x, cols.to_vec())))
    }

    /// Writes the columns of each part to the listed positions of a fresh
    /// `rows × total` matrix. Every position must be covered exactly once.
    pub fn assemble_cols(
        &mut self,
        parts: &[(Var, Vec<usize>)],
        rows: usize,
        total: usize,
    ) -> Result<Var, NumericsError> {
        let mut out = Matrix::zeros(rows, total);
        let mut seen = vec![false; total];
        for (v, idx) in parts {
            let pv = self.value(*v);
            if pv.rows() != rows || pv.cols() != idx.len() {
                return Err(shape_err("assemble_cols", pv.shape(), (rows, idx.len())));
            }
            for (c, &dst) in idx.iter().enumerate() {
                if dst >= total || seen[dst] {
                    return Err(NumericsError::Contract(format!(
                        "column {dst} assigned twice or out of range"
                    )));
                }
                seen[dst] = true;
                for r in 0..rows {
                    out[(r, dst)] = pv[(r, c)];
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(NumericsError::Contract(format!("column {missing} not covered")));
        }
        Ok(self.push(out, Op::AssembleCols(parts.to_vec())))
    }

    /// Euclidean norm of every column, as a 1×n row.
    pub fn col_norms(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Matrix::from_fn(1, xv.cols(), |_, c| {
            (0..xv.rows()).map(|r| xv[(r, c)].powi(2)).sum::<f64>().sqrt()
        });
        self.push(value, Op::ColNorms(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per row, the mean of the `k` largest entries, as a rows×1 column.
    /// Ties break toward the lower column index.
    pub fn topk_mean_rows(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if k == 0 || k > xv.cols() {
            return Err(NumericsError::Contract(format!(
                "top-k of {k} over {} columns",
                xv.cols()
            )));
        }
        let picks: Vec<Vec<usize>> = (0..xv.rows()).map(|r| top_k_indices(xv.row(r), k)).collect();
        let value = Matrix::from_fn(xv.rows(), 1, |r, _| {
            picks[r].iter().map(|&c| xv[(r, c)]).sum::<f64>() / k as f64
        });
        Ok(self.push(value, Op::TopKMeanRows { x, picks }))
    }

    /// KL divergence from `target` to `softmax(logits)`, for an n×1 logit
    /// column and a target distribution summing to one. Equals the
    /// cross-entropy minus the target's entropy, so a perfect fit scores 0.
    pub fn softmax_kl(&mut self, logits: Var, target: &[f64]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.cols() != 1 || lv.rows() != target.len() {
            return Err(shape_err("softmax_kl", lv.shape(), (target.len(), 1)));
        }
        let total: f64 = target.iter().sum();
        if target.iter().any(|&y| y < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(NumericsError::Contract(
                "target must be a probability distribution".into(),
            ));
        }
        let z: Vec<f64> = lv.column(0);
        let lse = log_sum_exp(&z);
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss: f64 = target
            .iter()
            .zip(&z)
            .filter(|(y, _)| **y > 0.0)
            .map(|(y, zi)| y * (y.ln() - (zi - lse)))
            .sum();
        let value = Matrix::filled(1, 1, loss.max(0.0));
        Ok(self.push(
            value,
            Op::SoftmaxKl {
                logits,
                probs,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a 1×1 `loss`. Returns one gradient per parameter in
    /// `params`; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss(lv.shape()));
        }
        let mut grads = Gradients::zeros_like(params);
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = &mut grads.grads[id.0];
                    if slot.shape() != g.shape() {
                        return Err(shape_err("backward(param)", slot.shape(), g.shape()));
                    }
                    slot.add_assign(&g)?;
                }
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let da = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut adj, *a, da);
                    }
                    if self.requires(*b) {
                        let db = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut adj, *a, g.hadamard(self.value(*b))?);
                    }
                    if self.requires(*b) {
                        accumulate(&mut adj, *b, g.hadamard(self.value(*a))?);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::AddColBias(x, b) => {
                    if self.requires(*b) {
                        let db = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                        accumulate(&mut adj, *b, db);
                    }
                    if self.requires(*x) {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::MulRowBroadcast(x, r) => {
                    let (xv, rv) = (self.value(*x), self.value(*r));
                    if self.requires(*r) {
                        let dr = Matrix::from_fn(1, xv.cols(), |_, t| {
                            (0..xv.rows()).map(|i| g[(i, t)] * xv[(i, t)]).sum()
                        });
                        accumulate(&mut adj, *r, dr);
                    }
                    if self.requires(*x) {
                        let dx = Matrix::from_fn(xv.rows(), xv.cols(), |i, t| g[(i, t)] * rv[(0, t)]);
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let dx = g.zip_with(xv, "leaky_relu'", |gi, xi| if xi > 0.0 { gi } else { gi * slope })?;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_with(&node.value, "sigmoid'", |gi, y| gi * y * (1.0 - y))?;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Im2Col { x, kernel } => {
                    let (c, t) = self.value(*x).shape();
                    let pad = kernel / 2;
                    let mut dx = Matrix::zeros(c, t);
                    for row in 0..c * kernel {
                        let (ch, k) = (row / kernel, row % kernel);
                        for col in 0..t {
                            let src = col as isize + k as isize - pad as isize;
                            if src >= 0 && src < t as isize {
                                dx[(ch, src as usize)] += g[(row, col)];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    let cols = g.cols();
                    if self.requires(*a) {
                        let da = Matrix::from_fn(ra, cols, |r, c| g[(r, c)]);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.requires(*b) {
                        let rb = self.value(*b).rows();
                        let db = Matrix::from_fn(rb, cols, |r, c| g[(ra + r, c)]);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::GatherCols(x, cols) => {
                    let (rows, total) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, total);
                    for (c, &src) in cols.iter().enumerate() {
                        for r in 0..rows {
                            dx[(r, src)] += g[(r, c)];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::AssembleCols(parts) => {
                    for (v, idx) in parts {
                        if self.requires(*v) {
                            accumulate(&mut adj, *v, g.select_columns(idx));
                        }
                    }
                }
                Op::ColNorms(x) => {
                    let xv = self.value(*x);
                    let norms = &node.value;
                    let dx = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| {
                        let n = norms[(0, c)];
                        if n > 0.0 {
                            g[(0, c)] * xv[(r, c)] / n
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut adj, *x, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::TopKMeanRows { x, picks } => {
                    let (r, c) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(r, c);
                    for (row, pick) in picks.iter().enumerate() {
                        let share = g[(row, 0)] / pick.len() as f64;
                        for &col in pick {
                            dx[(row, col)] += share;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxKl { logits, probs, target } => {
                    let scale = g[(0, 0)];
                    let dz = Matrix::from_fn(probs.len(), 1, |r, _| scale * (probs[r] - target[r]));
                    accumulate(&mut adj, *logits, dz);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
