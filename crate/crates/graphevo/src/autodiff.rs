//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is a write-once arena of nodes. Every operation appends a node
//! that stores its forward value plus whatever the backward pass needs, and
//! parents always precede children, so a single reverse sweep over the arena
//! is a valid topological traversal. Gradients are exact for the recorded
//! graph: stochastic choices (dropout masks) are sampled during the forward
//! build and frozen into the node, which keeps finite-difference checks and
//! repeated backward calls bit-deterministic.
//!
//! The op set is exactly what the forecasting networks need: dense products,
//! element-wise arithmetic, column concatenation, row-mean readout, the usual
//! nonlinearities, an L1 reconstruction distance, per-column batch
//! normalization, and dropout.

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;

/// Epsilon inside the batch-norm denominator. Chosen tiny so that normalizing
/// an already zero-mean unit-variance column perturbs it by well under 1e-9;
/// `f64` keeps this numerically safe even for near-constant columns.
pub const BATCH_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch { op: &'static str, lhs_rows: usize, lhs_cols: usize, rhs_rows: usize, rhs_cols: usize },
    #[error("backward requires a 1x1 scalar output node, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("log domain error: entry ({row},{col}) = {value} is not strictly positive")]
    LogDomain { row: usize, col: usize, value: f64 },
    #[error("dropout keep probability must lie in (0, 1], got {0}")]
    InvalidKeepProbability(f64),
    #[error("non-finite gradient for parameter of shape {rows}x{cols}")]
    NonFiniteGradient { rows: usize, cols: usize },
}

fn shape_err(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs_rows: lhs.rows(),
        lhs_cols: lhs.cols(),
        rhs_rows: rhs.rows(),
        rhs_cols: rhs.cols(),
    }
}

/// Handle into a [`Tape`]; only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Where batch normalization takes its statistics from.
pub enum BatchNormStats<'a> {
    /// Use the current column statistics of the input (training mode).
    Batch,
    /// Use frozen running statistics, each `1 x cols` (evaluation mode).
    Frozen { mean: &'a Matrix, var: &'a Matrix },
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    RowMean(NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    L1Distance(NodeId, NodeId),
    Log(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // Cached forward quantities; `batch` additionally carries the column
        // statistics so callers can maintain running averages.
        x_hat: Matrix,
        inv_std: Matrix,
        batch: Option<(Matrix, Matrix)>,
    },
    Dropout {
        x: NodeId,
        // Mask entries are 0 or 1/keep, so eval-time forwards need no rescale.
        mask: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Write-once computation graph. Build with the op methods, then call
/// [`Tape::backward`] on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Constant input: participates in forward values but receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Batch statistics recorded by a training-mode batch-norm node, if any.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&Matrix, &Matrix)> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { batch: Some((m, v)), .. } => Some((m, v)),
            _ => None,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = va.matmul(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let value = va.zip_with(vb, f);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", va, vb));
        }
        let value = va.concat_cols(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), needs))
    }

    /// Column-wise mean across rows: `r x c` → `1 x c`.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).row_mean();
        let needs = self.needs(a);
        self.push(value, Op::RowMean(a), needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid_scalar);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        let needs = self.needs(a);
        self.push(value, Op::Abs(a), needs)
    }

    /// Mean element-wise absolute difference, reduced to a `1 x 1` scalar.
    pub fn l1_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("l1_distance", va, vb));
        }
        let total: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Matrix::filled(1, 1, total / va.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::L1Distance(a, b), needs))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let va = self.value(a);
        for i in 0..va.rows() {
            for (j, &v) in va.row(i).iter().enumerate() {
                if v <= 0.0 {
                    return Err(AdError::LogDomain { row: i, col: j, value: v });
                }
            }
        }
        let value = va.map(f64::ln);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Log(a), needs))
    }

    /// Clamps entries into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp bounds must satisfy lo < hi, got [{lo}, {hi}]");
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(value, Op::Clamp { x: a, lo, hi }, needs)
    }

    /// Batch normalization over the row (sample) dimension, independently per
    /// column: `out[i][j] = gamma[j] * (x[i][j] - mean_j) / sqrt(var_j + eps) + beta[j]`.
    /// Variance is the biased (1/N) column variance. `gamma` and `beta` must be
    /// `1 x cols` nodes.
    pub fn batch_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchNormStats<'_>,
    ) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        for (name, id) in [("batch_norm_rows gamma", gamma), ("batch_norm_rows beta", beta)] {
            let vp = self.value(id);
            if vp.shape() != (1, cols) {
                return Err(shape_err(name, vp, vx));
            }
        }
        let (mean, var, batch) = match stats {
            BatchNormStats::Batch => {
                let mean = vx.row_mean();
                let mut var = Matrix::zeros(1, cols);
                for i in 0..rows {
                    for (j, &v) in vx.row(i).iter().enumerate() {
                        let d = v - mean.get(0, j);
                        var.set(0, j, var.get(0, j) + d * d);
                    }
                }
                let var = var.scale(1.0 / rows as f64);
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            BatchNormStats::Frozen { mean, var } => {
                if mean.shape() != (1, cols) || var.shape() != (1, cols) {
                    return Err(shape_err("batch_norm_rows frozen stats", mean, vx));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std = var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let mut x_hat = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                x_hat.set(i, j, (vx.get(i, j) - mean.get(0, j)) * inv_std.get(0, j));
            }
        }
        let vgamma = self.value(gamma);
        let vbeta = self.value(beta);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                value.set(i, j, vgamma.get(0, j) * x_hat.get(i, j) + vbeta.get(0, j));
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch }, needs))
    }

    /// Inverted dropout: each entry is kept with probability `keep` and scaled
    /// by `1/keep`. The sampled mask is frozen into the node, so backward is
    /// exact for the realized mask. `keep = 1.0` is the identity.
    pub fn dropout(&mut self, x: NodeId, keep: f64, rng: &mut impl Rng) -> Result<NodeId, AdError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(AdError::InvalidKeepProbability(keep));
        }
        let vx = self.value(x);
        let scale = 1.0 / keep;
        let mask = Matrix::from_fn(vx.rows(), vx.cols(), |_, _| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        });
        let value = vx.mul_elem(&mask);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a `1 x 1` output. Nodes that do not influence the
    /// output receive a zero gradient (reported as absent, see [`Gradients`]).
    pub fn backward(&self, output: NodeId) -> Result<Gradients, AdError> {
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            return Err(AdError::NonScalarOutput { rows: out.value.rows(), cols: out.value.cols() });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut Vec<Option<Matrix>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = g.matmul_nt(&self.nodes[b.0].value);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = self.nodes[a.0].value.matmul_tn(g);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.mul_elem(&self.nodes[b.0].value));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.mul_elem(&self.nodes[a.0].value));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let cb = self.nodes[b.0].value.cols();
                let rows = g.rows();
                if self.needs(*a) {
                    let mut da = Matrix::zeros(rows, ca);
                    for i in 0..rows {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(rows, cb);
                    for i in 0..rows {
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::RowMean(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let inv = 1.0 / va.rows() as f64;
                    let da = Matrix::from_fn(va.rows(), va.cols(), |_, j| g.get(0, j) * inv);
                    accumulate(grads, *a, da);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.transpose());
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da = g.zip_with(&self.nodes[a.0].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(grads, *a, da);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let da = g.zip_with(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(grads, *a, da);
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let da = g.zip_with(&self.nodes[a.0].value, |gv, x| gv * sign(x));
                    accumulate(grads, *a, da);
                }
            }
            Op::L1Distance(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let w = g.get(0, 0) / va.len() as f64;
                if self.needs(*a) {
                    accumulate(grads, *a, va.zip_with(vb, |x, y| w * sign(x - y)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, va.zip_with(vb, |x, y| -w * sign(x - y)));
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.zip_with(&self.nodes[a.0].value, |gv, x| gv / x));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let da = g.zip_with(&self.nodes[x.0].value, |gv, v| {
                        if v > *lo && v < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(grads, *x, da);
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch } => {
                let (rows, cols) = x_hat.shape();
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        sum_g[j] += g.get(i, j);
                        sum_gx[j] += g.get(i, j) * x_hat.get(i, j);
                    }
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Matrix::from_vec(1, cols, sum_g.clone()));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Matrix::from_vec(1, cols, sum_gx.clone()));
                }
                if self.needs(*x) {
                    let vgamma = &self.nodes[gamma.0].value;
                    let dx = if batch.is_some() {
                        // Batch statistics depend on x, so the mean/variance
                        // paths contribute: the classic fused formula.
                        let n = rows as f64;
                        Matrix::from_fn(rows, cols, |i, j| {
                            vgamma.get(0, j) * inv_std.get(0, j) / n
                                * (n * g.get(i, j) - sum_g[j] - x_hat.get(i, j) * sum_gx[j])
                        })
                    } else {
                        // Frozen statistics are constants: a pure affine map.
                        Matrix::from_fn(rows, cols, |i, j| {
                            g.get(i, j) * vgamma.get(0, j) * inv_std.get(0, j)
                        })
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.mul_elem(mask));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: NodeId, m: Matrix) {
    match &mut grads[target.0] {
        Some(acc) => acc.add_assign(&m),
        slot @ None => *slot = Some(m),
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

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward sweep. Nodes outside the output's ancestry carry no
/// entry; [`Gradients::for_node`] materializes those as zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero matrix of the node's shape when the node
    /// does not influence the differentiated output.
    pub fn for_node(&self, tape: &Tape, id: NodeId) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }
}
