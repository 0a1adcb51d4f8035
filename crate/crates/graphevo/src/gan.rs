//! Adversarial graph normalizer.
//!
//! Two edge-conditioned graph-convolutional networks trained against each
//! other: a three-layer **normalizer** (encoder–decoder with a skip
//! connection) that maps a subject's connectivity graph toward the
//! population template, and a two-layer **discriminator** that scores how
//! template-like a candidate graph looks. The normalizer's first two layers
//! double as the embedding used downstream for neighbor selection.
//!
//! Every edge convolution runs over the complete neighborhood (all nodes,
//! self-loop included, so `|N(i)| = n_r`); the per-edge filter is an affine
//! map of the scalar edge weight, which lets the whole layer factor into two
//! dense products — see [`edge_conv_preactivation`] for the reference form.
//!
//! Training is single-threaded and bit-reproducible under a seed. Trained
//! models are immutable and safe to share across threads for inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::autodiff::{AdError, BatchNormStats, Gradients, NodeId, Tape};
use crate::cbt::Cbt;
use crate::graph::{BrainGraph, GraphError};
use crate::io;
use crate::matrix::Matrix;

/// Hidden width of the normalizer's first encoder layer.
pub const HIDDEN_NORMALIZER: usize = 36;
/// Hidden width of the discriminator's first layer.
pub const HIDDEN_DISCRIMINATOR: usize = 32;
/// Scores are clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before any log.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Running-statistics update rate: `running ← 0.9·running + 0.1·batch`.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid training config: {field} = {value}")]
    InvalidConfig { field: &'static str, value: f64 },
    #[error("training requires at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("graph has {got} regions, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("layer input has width {got}, expected {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("non-finite {loss} ({value}) at epoch {epoch}, subject {subject}")]
    NonFiniteLoss { epoch: usize, subject: usize, loss: &'static str, value: f64 },
    #[error("optimizer failure at epoch {epoch}, subject {subject}: {source}")]
    TrainingStep { epoch: usize, subject: usize, source: AdamError },
    #[error("model file {path}: unknown tensor {name}")]
    UnknownTensor { path: String, name: String },
    #[error("model file {path}: missing tensor {name}")]
    MissingTensor { path: String, name: String },
    #[error("model file {path}: tensor {name} is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    TensorShape { path: String, name: String, got_rows: usize, got_cols: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Whether a forward pass uses batch statistics and live dropout (training)
/// or frozen statistics and no dropout (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

// ── Layers ───────────────────────────────────────────────────────────────────

/// Affine batch-normalization parameters plus the running statistics frozen
/// for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    gamma: Matrix,        // 1 x d_out
    beta: Matrix,         // 1 x d_out
    running_mean: Matrix, // 1 x d_out
    running_var: Matrix,  // 1 x d_out
}

impl BatchNormState {
    fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
        }
    }

    /// Folds one batch's statistics into the running averages.
    fn absorb(&mut self, mean: &Matrix, var: &Matrix) {
        let keep = 1.0 - BATCH_NORM_MOMENTUM;
        for j in 0..self.running_mean.cols() {
            let m = keep * self.running_mean.get(0, j) + BATCH_NORM_MOMENTUM * mean.get(0, j);
            let v = keep * self.running_var.get(0, j) + BATCH_NORM_MOMENTUM * var.get(0, j);
            self.running_mean.set(0, j, m);
            self.running_var.set(0, j, v);
        }
    }
}

/// One edge-conditioned convolution layer.
///
/// The per-edge filter is affine in the scalar edge weight `w`:
/// `Θ(w) = w·filter_scale + filter_base`, each `d_out x d_in`. With the
/// complete neighborhood this factors into dense products, so forward and
/// backward cost `O(n²·d)` instead of `O(n²·d_in·d_out)` per node pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvLayer {
    d_in: usize,
    d_out: usize,
    filter_scale: Matrix, // d_out x d_in
    filter_base: Matrix,  // d_out x d_in
    bias: Matrix,         // 1 x d_out
    norm: Option<BatchNormState>,
    activation: Activation,
    dropout_keep: f64,
}

impl EdgeConvLayer {
    /// Glorot-uniform filters (limit `√(6/(d_in+d_out))`, drawn row-major,
    /// `filter_scale` before `filter_base`), zero bias, identity norm.
    pub fn new(
        d_in: usize,
        d_out: usize,
        normed: bool,
        activation: Activation,
        dropout_keep: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(d_in >= 1 && d_out >= 1, "layer widths must be positive, got {d_in}x{d_out}");
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let filter_scale = draw(d_out, d_in);
        let filter_base = draw(d_out, d_in);
        Self {
            d_in,
            d_out,
            filter_scale,
            filter_base,
            bias: Matrix::zeros(1, d_out),
            norm: normed.then(|| BatchNormState::new(d_out)),
            activation,
            dropout_keep,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Per-edge slope of the affine filter generator, `d_out × d_in`.
    pub fn filter_scale(&self) -> &Matrix {
        &self.filter_scale
    }

    /// Edge-independent part of the affine filter generator, `d_out × d_in`.
    pub fn filter_base(&self) -> &Matrix {
        &self.filter_base
    }

    /// Node-shared bias, `1 × d_out`.
    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    fn trainable(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.filter_scale, &self.filter_base, &self.bias];
        if let Some(n) = &self.norm {
            v.push(&n.gamma);
            v.push(&n.beta);
        }
        v
    }

    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.filter_scale, &mut self.filter_base, &mut self.bias];
        if let Some(n) = &mut self.norm {
            v.push(&mut n.gamma);
            v.push(&mut n.beta);
        }
        v
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut v = vec![
            (format!("{prefix}.filter_scale"), &self.filter_scale),
            (format!("{prefix}.filter_base"), &self.filter_base),
            (format!("{prefix}.bias"), &self.bias),
        ];
        if let Some(n) = &self.norm {
            v.push((format!("{prefix}.norm_gamma"), &n.gamma));
            v.push((format!("{prefix}.norm_beta"), &n.beta));
            v.push((format!("{prefix}.norm_running_mean"), &n.running_mean));
            v.push((format!("{prefix}.norm_running_var"), &n.running_var));
        }
        v
    }

    fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        let mut v = vec![
            (format!("{prefix}.filter_scale"), &mut self.filter_scale),
            (format!("{prefix}.filter_base"), &mut self.filter_base),
            (format!("{prefix}.bias"), &mut self.bias),
        ];
        if let Some(n) = &mut self.norm {
            v.push((format!("{prefix}.norm_gamma"), &mut n.gamma));
            v.push((format!("{prefix}.norm_beta"), &mut n.beta));
            v.push((format!("{prefix}.norm_running_mean"), &mut n.running_mean));
            v.push((format!("{prefix}.norm_running_var"), &mut n.running_var));
        }
        v
    }
}

/// Tape handles for one layer's parameters.
struct BoundLayer {
    scale: NodeId,
    base: NodeId,
    bias: NodeId,
    norm: Option<(NodeId, NodeId)>, // (gamma, beta)
}

impl BoundLayer {
    fn param_ids(&self) -> Vec<NodeId> {
        let mut v = vec![self.scale, self.base, self.bias];
        if let Some((g, b)) = self.norm {
            v.push(g);
            v.push(b);
        }
        v
    }
}

/// Per-tape constants shared by every convolution on that tape.
struct TapeCommon {
    ones_nn: NodeId,  // n x n, sums features over all nodes
    ones_col: NodeId, // n x 1, broadcasts row vectors to all nodes
    n: usize,
}

impl TapeCommon {
    fn new(tape: &mut Tape, n: usize) -> Self {
        Self {
            ones_nn: tape.constant(Matrix::filled(n, n, 1.0)),
            ones_col: tape.constant(Matrix::filled(n, 1, 1.0)),
            n,
        }
    }
}

struct LayerOut {
    out: NodeId,
    /// Train-mode batch-norm node, for running-statistics upkeep.
    bn: Option<NodeId>,
}

impl EdgeConvLayer {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayer {
        fn put(tape: &mut Tape, m: &Matrix, trainable: bool) -> NodeId {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        }
        BoundLayer {
            scale: put(tape, &self.filter_scale, trainable),
            base: put(tape, &self.filter_base, trainable),
            bias: put(tape, &self.bias, trainable),
            norm: self
                .norm
                .as_ref()
                .map(|n| (put(tape, &n.gamma, trainable), put(tape, &n.beta, trainable))),
        }
    }

    /// Builds the layer on the tape. `mixing` is the `n x n` conditioning
    /// graph (symmetric, so it multiplies from the left as-is); `features`
    /// is `n x d_in`.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundLayer,
        common: &TapeCommon,
        mixing: NodeId,
        features: NodeId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<LayerOut, GanError> {
        let got = tape.value(features).cols();
        if got != self.d_in {
            return Err(GanError::FeatureWidth { got, expected: self.d_in });
        }
        // (1/n)·[ (W·Y)·Aᵀ + (1·Y)·Cᵀ ] + 1·b  — the factored form of
        // mean_j (w_ji·A + C)·y_j + b over the complete neighborhood.
        let mixed = tape.matmul(mixing, features)?;
        let summed = tape.matmul(common.ones_nn, features)?;
        let scale_t = tape.transpose(bound.scale);
        let base_t = tape.transpose(bound.base);
        let term_scale = tape.matmul(mixed, scale_t)?;
        let term_base = tape.matmul(summed, base_t)?;
        let combined = tape.add(term_scale, term_base)?;
        let averaged = tape.scale(combined, 1.0 / common.n as f64);
        let broadcast_bias = tape.matmul(common.ones_col, bound.bias)?;
        let mut y = tape.add(averaged, broadcast_bias)?;
        let mut bn = None;
        if let Some(norm) = &self.norm {
            let (gamma, beta) = bound.norm.expect("bound layer lacks norm handles");
            y = match mode {
                Mode::Train => {
                    let node = tape.batch_norm_rows(y, gamma, beta, BatchNormStats::Batch)?;
                    bn = Some(node);
                    node
                }
                Mode::Eval => tape.batch_norm_rows(
                    y,
                    gamma,
                    beta,
                    BatchNormStats::Frozen { mean: &norm.running_mean, var: &norm.running_var },
                )?,
            };
        }
        y = match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Sigmoid => tape.sigmoid(y),
            Activation::Linear => y,
        };
        if mode == Mode::Train && self.dropout_keep < 1.0 {
            y = tape.dropout(y, self.dropout_keep, rng)?;
        }
        Ok(LayerOut { out: y, bn })
    }
}

/// Reference (pre-activation) form of the edge convolution, computed with
/// plain matrix algebra: `out(i) = (1/n)·Σ_j (w_ji·A + C)·y_j + b` over the
/// complete neighborhood.
pub fn edge_conv_preactivation(
    layer: &EdgeConvLayer,
    features: &Matrix,
    graph: &BrainGraph,
) -> Result<Matrix, GanError> {
    let n = graph.n_r();
    if features.rows() != n {
        return Err(GanError::DimensionMismatch { got: features.rows(), expected: n });
    }
    if features.cols() != layer.d_in {
        return Err(GanError::FeatureWidth { got: features.cols(), expected: layer.d_in });
    }
    let w = graph.weights();
    let mixed = w.matmul(features).matmul_nt(&layer.filter_scale);
    let summed = Matrix::filled(n, n, 1.0).matmul(features).matmul_nt(&layer.filter_base);
    let mut out = mixed.add(&summed).scale(1.0 / n as f64);
    for i in 0..n {
        for j in 0..layer.d_out {
            let v = out.get(i, j) + layer.bias.get(0, j);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// One full evaluation-mode layer application (normalization with frozen
/// statistics, activation; dropout disabled).
pub fn edge_conv_forward(
    layer: &EdgeConvLayer,
    features: &Matrix,
    graph: &BrainGraph,
) -> Result<Matrix, GanError> {
    let mut tape = Tape::new();
    let common = TapeCommon::new(&mut tape, graph.n_r());
    let mixing = tape.constant(graph.weights().clone());
    let feats = tape.constant(features.clone());
    let bound = layer.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = layer.forward(&mut tape, &bound, &common, mixing, feats, Mode::Eval, &mut rng)?;
    Ok(tape.value(out.out).clone())
}

// ── Normalizer ───────────────────────────────────────────────────────────────

/// Three-layer encoder–decoder normalizer. Input node features are the rows
/// of the subject's connectivity matrix; the same matrix conditions every
/// convolution's edge filters.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    n_r: usize,
    enc1: EdgeConvLayer, // n_r -> h
    enc2: EdgeConvLayer, // h -> 1 (the embedding layer)
    dec: EdgeConvLayer,  // 1 + h -> n_r (skip concatenation)
}

struct BoundNormalizer {
    enc1: BoundLayer,
    enc2: BoundLayer,
    dec: BoundLayer,
}

impl BoundNormalizer {
    fn param_ids(&self) -> Vec<NodeId> {
        let mut v = self.enc1.param_ids();
        v.extend(self.enc2.param_ids());
        v.extend(self.dec.param_ids());
        v
    }
}

struct NormalizerOut {
    /// Symmetrized, zero-diagonal n x n output graph.
    graph: NodeId,
    bn_enc1: Option<NodeId>,
    bn_enc2: Option<NodeId>,
    bn_dec: Option<NodeId>,
}

impl Normalizer {
    fn new(n_r: usize, h: usize, _dropout_keep: f64, rng: &mut impl Rng) -> Self {
        // The embedding layer keeps neither batch normalization, nor a ReLU,
        // nor dropout: normalizing the width-1 channel per graph erases
        // exactly the cross-graph offsets subject selection depends on, a
        // ReLU (or a saturating squash of a normalized channel) silences
        // large parts of the per-node embedding, and dropout on a width-1
        // bottleneck blacks out whole nodes, pushing the decoder onto the
        // skip path instead of the embedding. The raw linear channel keeps
        // every node alive and the graph-to-graph offsets intact.
        Self {
            n_r,
            enc1: EdgeConvLayer::new(n_r, h, true, Activation::Relu, 1.0, rng),
            enc2: EdgeConvLayer::new(h, 1, false, Activation::Linear, 1.0, rng),
            dec: EdgeConvLayer::new(1 + h, n_r, true, Activation::Sigmoid, 1.0, rng),
        }
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNormalizer {
        BoundNormalizer {
            enc1: self.enc1.bind(tape, trainable),
            enc2: self.enc2.bind(tape, trainable),
            dec: self.dec.bind(tape, trainable),
        }
    }

    /// Full forward pass: encode, skip-concatenate, decode, squash,
    /// symmetrize, and zero the diagonal.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundNormalizer,
        common: &TapeCommon,
        x: NodeId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NormalizerOut, GanError> {
        let y1 = self.enc1.forward(tape, &bound.enc1, common, x, x, mode, rng)?;
        let y2 = self.enc2.forward(tape, &bound.enc2, common, x, y1.out, mode, rng)?;
        let skip = tape.concat_cols(y2.out, y1.out)?;
        let decoded = self.dec.forward(tape, &bound.dec, common, x, skip, mode, rng)?;
        let transposed = tape.transpose(decoded.out);
        let sum = tape.add(decoded.out, transposed)?;
        let symmetric = tape.scale(sum, 0.5);
        let n = self.n_r;
        let mask = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
        let graph = tape.mul(symmetric, mask)?;
        Ok(NormalizerOut { graph, bn_enc1: y1.bn, bn_enc2: y2.bn, bn_dec: decoded.bn })
    }

    fn check_n_r(&self, graph: &BrainGraph) -> Result<(), GanError> {
        if graph.n_r() != self.n_r {
            return Err(GanError::DimensionMismatch { got: graph.n_r(), expected: self.n_r });
        }
        Ok(())
    }

    /// Evaluation-mode normalization of one graph. Deterministic; the output
    /// satisfies every connectivity-graph invariant by construction.
    pub fn normalize(&self, graph: &BrainGraph) -> Result<BrainGraph, GanError> {
        self.check_n_r(graph)?;
        let mut tape = Tape::new();
        let common = TapeCommon::new(&mut tape, self.n_r);
        let x = tape.constant(graph.weights().clone());
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, &common, x, Mode::Eval, &mut rng)?;
        Ok(BrainGraph::new(tape.value(out.graph).clone())?)
    }

    /// Evaluation-mode embedding: the encoder's per-node output, length n_r.
    pub fn embed(&self, graph: &BrainGraph) -> Result<Vec<f64>, GanError> {
        self.check_n_r(graph)?;
        let mut tape = Tape::new();
        let common = TapeCommon::new(&mut tape, self.n_r);
        let x = tape.constant(graph.weights().clone());
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y1 = self.enc1.forward(&mut tape, &bound.enc1, &common, x, x, Mode::Eval, &mut rng)?;
        let y2 = self.enc2.forward(&mut tape, &bound.enc2, &common, x, y1.out, Mode::Eval, &mut rng)?;
        Ok(tape.value(y2.out).data().to_vec())
    }
}

// ── Discriminator ────────────────────────────────────────────────────────────

/// Two-layer discriminator. A candidate graph is presented as node features
/// `[candidate rows | template rows]` (n x 2n), with message passing over the
/// candidate's own edges; the readout is the node-mean squashed to (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    n_r: usize,
    layer1: EdgeConvLayer, // 2·n_r -> h_d
    layer2: EdgeConvLayer, // h_d -> 1
}

struct BoundDiscriminator {
    layer1: BoundLayer,
    layer2: BoundLayer,
}

impl BoundDiscriminator {
    fn param_ids(&self) -> Vec<NodeId> {
        let mut v = self.layer1.param_ids();
        v.extend(self.layer2.param_ids());
        v
    }
}

struct DiscOut {
    /// 1 x 1 realness score in (0,1).
    score: NodeId,
    bn_layer1: Option<NodeId>,
}

impl Discriminator {
    fn new(n_r: usize, h_d: usize, dropout_keep: f64, rng: &mut impl Rng) -> Self {
        Self {
            n_r,
            layer1: EdgeConvLayer::new(2 * n_r, h_d, false, Activation::Relu, dropout_keep, rng),
            layer2: EdgeConvLayer::new(h_d, 1, false, Activation::Linear, 1.0, rng),
        }
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            layer1: self.layer1.bind(tape, trainable),
            layer2: self.layer2.bind(tape, trainable),
        }
    }

    /// `candidate` is an n x n node (live or constant); `template_rows` is
    /// the n x n template constant supplying the second half of the features.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundDiscriminator,
        common: &TapeCommon,
        candidate: NodeId,
        template_rows: NodeId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<DiscOut, GanError> {
        let features = tape.concat_cols(candidate, template_rows)?;
        let y1 = self.layer1.forward(tape, &bound.layer1, common, candidate, features, mode, rng)?;
        let y2 = self.layer2.forward(tape, &bound.layer2, common, candidate, y1.out, mode, rng)?;
        let pooled = tape.row_mean(y2.out);
        let score = tape.sigmoid(pooled);
        Ok(DiscOut { score, bn_layer1: y1.bn })
    }

    /// Evaluation-mode realness score of `candidate` against the template.
    pub fn discriminate(&self, candidate: &BrainGraph, cbt: &Cbt) -> Result<f64, GanError> {
        if candidate.n_r() != self.n_r || cbt.n_r() != self.n_r {
            return Err(GanError::DimensionMismatch {
                got: if candidate.n_r() != self.n_r { candidate.n_r() } else { cbt.n_r() },
                expected: self.n_r,
            });
        }
        let mut tape = Tape::new();
        let common = TapeCommon::new(&mut tape, self.n_r);
        let cand = tape.constant(candidate.weights().clone());
        let tmpl = tape.constant(cbt.template().weights().clone());
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, &common, cand, tmpl, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.score).get(0, 0))
    }
}

// ── Model ────────────────────────────────────────────────────────────────────

/// The trained (or training) pair of networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub normalizer: Normalizer,
    pub discriminator: Discriminator,
}

impl GanModel {
    /// Initializes both networks from one generator. Draw order: normalizer
    /// enc1, enc2, dec, then discriminator layer 1, layer 2.
    pub fn new(n_r: usize, h: usize, h_d: usize, dropout_keep: f64, rng: &mut impl Rng) -> Self {
        Self {
            normalizer: Normalizer::new(n_r, h, dropout_keep, rng),
            discriminator: Discriminator::new(n_r, h_d, dropout_keep, rng),
        }
    }

    pub fn n_r(&self) -> usize {
        self.normalizer.n_r
    }

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = Vec::new();
        v.extend(self.normalizer.enc1.named_tensors("normalizer.enc1"));
        v.extend(self.normalizer.enc2.named_tensors("normalizer.enc2"));
        v.extend(self.normalizer.dec.named_tensors("normalizer.dec"));
        v.extend(self.discriminator.layer1.named_tensors("discriminator.layer1"));
        v.extend(self.discriminator.layer2.named_tensors("discriminator.layer2"));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = Vec::new();
        v.extend(self.normalizer.enc1.named_tensors_mut("normalizer.enc1"));
        v.extend(self.normalizer.enc2.named_tensors_mut("normalizer.enc2"));
        v.extend(self.normalizer.dec.named_tensors_mut("normalizer.dec"));
        v.extend(self.discriminator.layer1.named_tensors_mut("discriminator.layer1"));
        v.extend(self.discriminator.layer2.named_tensors_mut("discriminator.layer2"));
        v
    }

    /// Writes every tensor (running statistics included) as plain text.
    pub fn save(&self, path: &Path) -> Result<(), GanError> {
        let mut out = String::from("# adversarial normalizer model\n");
        let _ = writeln!(out, "n_r = {}", self.normalizer.n_r);
        let _ = writeln!(out, "hidden_normalizer = {}", self.normalizer.enc1.d_out);
        let _ = writeln!(out, "hidden_discriminator = {}", self.discriminator.layer1.d_out);
        // The discriminator's first layer is the only one that drops units,
        // so it carries the configured keep probability.
        let _ = writeln!(
            out,
            "dropout_keep = {}",
            io::format_value(self.discriminator.layer1.dropout_keep)
        );
        for (name, m) in self.named_tensors() {
            let _ = writeln!(out, "tensor = {name} {} {}", m.rows(), m.cols());
            out.push_str(&io::matrix_to_csv(m));
        }
        fs::write(path, out)
            .map_err(|e| GraphError::Io { path: path.display().to_string(), source: e })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GanError> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path)
            .map_err(|e| GraphError::Io { path: display.clone(), source: e })?;
        let parse_err = |line: usize, message: String| {
            GraphError::Parse { path: display.clone(), line, message }
        };
        let mut n_r = None;
        let mut h = None;
        let mut h_d = None;
        let mut dropout_keep = None;
        let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let Some((key, value)) = io::key_value(line) else { continue };
            match key {
                "n_r" => n_r = Some(parse_usize(value).map_err(|m| parse_err(idx + 1, m))?),
                "hidden_normalizer" => h = Some(parse_usize(value).map_err(|m| parse_err(idx + 1, m))?),
                "hidden_discriminator" => {
                    h_d = Some(parse_usize(value).map_err(|m| parse_err(idx + 1, m))?)
                }
                "dropout_keep" => {
                    dropout_keep =
                        Some(value.parse::<f64>().map_err(|e| parse_err(idx + 1, e.to_string()))?)
                }
                "tensor" => {
                    let mut parts = value.split_whitespace();
                    let (Some(name), Some(r), Some(c), None) =
                        (parts.next(), parts.next(), parts.next(), parts.next())
                    else {
                        return Err(parse_err(idx + 1, format!("bad tensor header: {value}")).into());
                    };
                    let rows = parse_usize(r).map_err(|m| parse_err(idx + 1, m))?;
                    let cols = parse_usize(c).map_err(|m| parse_err(idx + 1, m))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let Some((ridx, row)) = lines.next() else {
                            return Err(parse_err(idx + 1, format!("tensor {name} truncated")).into());
                        };
                        for tok in row.split(',') {
                            let v = tok.trim().parse::<f64>().map_err(|e| {
                                parse_err(ridx + 1, format!("bad value {tok:?}: {e}"))
                            })?;
                            data.push(v);
                        }
                    }
                    if data.len() != rows * cols {
                        return Err(parse_err(
                            idx + 1,
                            format!("tensor {name}: {} values for {rows}x{cols}", data.len()),
                        )
                        .into());
                    }
                    tensors.insert(name.to_string(), Matrix::from_vec(rows, cols, data));
                }
                other => return Err(parse_err(idx + 1, format!("unknown key {other:?}")).into()),
            }
        }
        let missing_key =
            |k: &str| GraphError::Parse { path: display.clone(), line: 0, message: format!("missing key {k}") };
        let n_r = n_r.ok_or_else(|| missing_key("n_r"))?;
        let h = h.ok_or_else(|| missing_key("hidden_normalizer"))?;
        let h_d = h_d.ok_or_else(|| missing_key("hidden_discriminator"))?;
        let keep = dropout_keep.ok_or_else(|| missing_key("dropout_keep"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = GanModel::new(n_r, h, h_d, keep, &mut rng);
        for (name, slot) in model.named_tensors_mut() {
            let Some(found) = tensors.remove(&name) else {
                return Err(GanError::MissingTensor { path: display, name });
            };
            if found.shape() != slot.shape() {
                return Err(GanError::TensorShape {
                    path: display,
                    name,
                    got_rows: found.rows(),
                    got_cols: found.cols(),
                    rows: slot.rows(),
                    cols: slot.cols(),
                });
            }
            *slot = found;
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(GanError::UnknownTensor { path: display, name });
        }
        Ok(model)
    }
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.trim().parse::<usize>().map_err(|e| format!("bad integer {s:?}: {e}"))
}

// ── Losses ───────────────────────────────────────────────────────────────────

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the L1 reconstruction term in the normalizer loss.
    pub lambda: f64,
    pub lr_normalizer: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Keep probability for the discriminator's first-layer dropout; the
    /// normalizer itself trains dropout-free.
    pub dropout_keep: f64,
    pub hidden_normalizer: usize,
    pub hidden_discriminator: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            lr_normalizer: 0.001,
            lr_discriminator: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 700,
            dropout_keep: 0.9,
            hidden_normalizer: HIDDEN_NORMALIZER,
            hidden_discriminator: HIDDEN_DISCRIMINATOR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |field, value| Err(GanError::InvalidConfig { field, value });
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if self.epochs < 1 {
            return bad("epochs", self.epochs as f64);
        }
        for (field, v) in [("lr_normalizer", self.lr_normalizer), ("lr_discriminator", self.lr_discriminator)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, v);
            }
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, v);
            }
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep", self.dropout_keep);
        }
        if self.hidden_normalizer < 1 {
            return bad("hidden_normalizer", self.hidden_normalizer as f64);
        }
        if self.hidden_discriminator < 1 {
            return bad("hidden_discriminator", self.hidden_discriminator as f64);
        }
        Ok(())
    }
}

/// Mean per-subject losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub discriminator: f64,
    pub normalizer: f64,
    pub l1: f64,
}

/// `−[log D(real) + log(1 − D(fake))]`, scores clamped away from {0, 1}.
fn discriminator_loss(tape: &mut Tape, real: NodeId, fake: NodeId) -> Result<NodeId, AdError> {
    let real_c = tape.clamp(real, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let log_real = tape.log(real_c)?;
    let fake_c = tape.clamp(fake, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let one = tape.constant(Matrix::filled(1, 1, 1.0));
    let one_minus = tape.sub(one, fake_c)?;
    let log_fake = tape.log(one_minus)?;
    let total = tape.add(log_real, log_fake)?;
    Ok(tape.scale(total, -1.0))
}

/// Non-saturating generator loss `−log D(fake) + λ·mean|fake − input|`;
/// returns `(loss, l1 term)`.
fn normalizer_loss(
    tape: &mut Tape,
    fake_score: NodeId,
    fake_graph: NodeId,
    input_graph: NodeId,
    lambda: f64,
) -> Result<(NodeId, NodeId), AdError> {
    let clamped = tape.clamp(fake_score, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let log_fake = tape.log(clamped)?;
    let adversarial = tape.scale(log_fake, -1.0);
    let l1 = tape.l1_distance(fake_graph, input_graph)?;
    let weighted = tape.scale(l1, lambda);
    let loss = tape.add(adversarial, weighted)?;
    Ok((loss, l1))
}

/// Both losses built jointly on one tape, fake branch left attached to the
/// normalizer. Used for diagnostics and gradient verification; the training
/// loop itself detaches the fake before the discriminator step.
pub struct JointLoss {
    pub tape: Tape,
    pub loss_discriminator: NodeId,
    pub loss_normalizer: NodeId,
    pub loss_l1: NodeId,
    /// Trainable normalizer tensors on the tape, in registry order.
    pub normalizer_params: Vec<NodeId>,
    /// Trainable discriminator tensors on the tape, in registry order.
    pub discriminator_params: Vec<NodeId>,
}

/// Builds batch-averaged `(L_D, L_N, L_L1)` on a fresh tape.
pub fn build_joint_loss(
    model: &GanModel,
    batch: &[&BrainGraph],
    cbt: &Cbt,
    lambda: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<JointLoss, GanError> {
    if batch.is_empty() {
        return Err(GanError::EmptyBatch);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(GanError::InvalidConfig { field: "lambda", value: lambda });
    }
    let n_r = model.n_r();
    if cbt.n_r() != n_r {
        return Err(GanError::DimensionMismatch { got: cbt.n_r(), expected: n_r });
    }
    let mut tape = Tape::new();
    let common = TapeCommon::new(&mut tape, n_r);
    let bound_n = model.normalizer.bind(&mut tape, true);
    let bound_d = model.discriminator.bind(&mut tape, true);
    let template = tape.constant(cbt.template().weights().clone());
    let mut sum_d = None;
    let mut sum_n = None;
    let mut sum_l1 = None;
    for graph in batch {
        model.normalizer.check_n_r(graph)?;
        let x = tape.constant(graph.weights().clone());
        let norm = model.normalizer.forward(&mut tape, &bound_n, &common, x, mode, rng)?;
        let real =
            model.discriminator.forward(&mut tape, &bound_d, &common, template, template, mode, rng)?;
        let fake =
            model.discriminator.forward(&mut tape, &bound_d, &common, norm.graph, template, mode, rng)?;
        let l_d = discriminator_loss(&mut tape, real.score, fake.score)?;
        let (l_n, l1) = normalizer_loss(&mut tape, fake.score, norm.graph, x, lambda)?;
        sum_d = Some(match sum_d {
            None => l_d,
            Some(prev) => tape.add(prev, l_d)?,
        });
        sum_n = Some(match sum_n {
            None => l_n,
            Some(prev) => tape.add(prev, l_n)?,
        });
        sum_l1 = Some(match sum_l1 {
            None => l1,
            Some(prev) => tape.add(prev, l1)?,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let loss_discriminator = tape.scale(sum_d.expect("non-empty batch"), inv);
    let loss_normalizer = tape.scale(sum_n.expect("non-empty batch"), inv);
    let loss_l1 = tape.scale(sum_l1.expect("non-empty batch"), inv);
    Ok(JointLoss {
        tape,
        loss_discriminator,
        loss_normalizer,
        loss_l1,
        normalizer_params: bound_n.param_ids(),
        discriminator_params: bound_d.param_ids(),
    })
}

/// Batch-averaged `(L_D, L_N, L_L1)` in evaluation mode (deterministic).
pub fn losses(
    model: &GanModel,
    batch: &[&BrainGraph],
    cbt: &Cbt,
    lambda: f64,
) -> Result<(f64, f64, f64), GanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let joint = build_joint_loss(model, batch, cbt, lambda, Mode::Eval, &mut rng)?;
    Ok((
        joint.tape.value(joint.loss_discriminator).get(0, 0),
        joint.tape.value(joint.loss_normalizer).get(0, 0),
        joint.tape.value(joint.loss_l1).get(0, 0),
    ))
}

// ── Training ─────────────────────────────────────────────────────────────────

fn adam_states(shapes: &[&Matrix], lr: f64, config: &TrainConfig) -> Vec<AdamState> {
    let adam = AdamConfig { learning_rate: lr, beta1: config.beta1, beta2: config.beta2, ..AdamConfig::default() };
    shapes.iter().map(|m| AdamState::new(m.rows(), m.cols(), adam.clone())).collect()
}

fn apply_steps(
    params: Vec<&mut Matrix>,
    ids: &[NodeId],
    grads: &Gradients,
    tape: &Tape,
    states: &mut [AdamState],
) -> Result<(), AdamError> {
    for ((param, &id), state) in params.into_iter().zip(ids).zip(states.iter_mut()) {
        let grad = grads.for_node(tape, id);
        state.step(param, &grad)?;
    }
    Ok(())
}

/// Adversarial training: per subject, one discriminator step on the detached
/// fake, then one normalizer step through the freshly updated discriminator.
/// Subjects are reshuffled every epoch with the same generator that seeded
/// the weights; dropout masks are drawn from it in forward order.
pub fn train(
    training: &[&BrainGraph],
    cbt: &Cbt,
    config: &TrainConfig,
) -> Result<(GanModel, Vec<EpochLosses>), GanError> {
    config.validate()?;
    if training.len() < 2 {
        return Err(GanError::TooFewSubjects(training.len()));
    }
    let n_r = cbt.n_r();
    for g in training {
        if g.n_r() != n_r {
            return Err(GanError::DimensionMismatch { got: g.n_r(), expected: n_r });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GanModel::new(
        n_r,
        config.hidden_normalizer,
        config.hidden_discriminator,
        config.dropout_keep,
        &mut rng,
    );
    let mut adam_n = adam_states(&model.normalizer_trainable(), config.lr_normalizer, config);
    let mut adam_d = adam_states(&model.discriminator_trainable(), config.lr_discriminator, config);
    let mut order: Vec<usize> = (0..training.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for &subject in &order {
            let (l_d, l_n, l1) = subject_step(
                &mut model,
                training[subject],
                cbt,
                config,
                &mut adam_n,
                &mut adam_d,
                &mut rng,
                epoch,
                subject,
            )?;
            sums.0 += l_d;
            sums.1 += l_n;
            sums.2 += l1;
        }
        let inv = 1.0 / training.len() as f64;
        trace.push(EpochLosses {
            epoch,
            discriminator: sums.0 * inv,
            normalizer: sums.1 * inv,
            l1: sums.2 * inv,
        });
    }
    Ok((model, trace))
}

impl GanModel {
    fn normalizer_trainable(&self) -> Vec<&Matrix> {
        let mut v = self.normalizer.enc1.trainable();
        v.extend(self.normalizer.enc2.trainable());
        v.extend(self.normalizer.dec.trainable());
        v
    }

    fn normalizer_trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.normalizer.enc1.trainable_mut();
        v.extend(self.normalizer.enc2.trainable_mut());
        v.extend(self.normalizer.dec.trainable_mut());
        v
    }

    fn discriminator_trainable(&self) -> Vec<&Matrix> {
        let mut v = self.discriminator.layer1.trainable();
        v.extend(self.discriminator.layer2.trainable());
        v
    }

    fn discriminator_trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.discriminator.layer1.trainable_mut();
        v.extend(self.discriminator.layer2.trainable_mut());
        v
    }

    /// Every trainable tensor of both networks, normalizer first, in the
    /// same order the joint loss registers them on its tape.
    pub fn all_trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.normalizer.enc1.trainable_mut();
        v.extend(self.normalizer.enc2.trainable_mut());
        v.extend(self.normalizer.dec.trainable_mut());
        v.extend(self.discriminator.layer1.trainable_mut());
        v.extend(self.discriminator.layer2.trainable_mut());
        v
    }
}

#[allow(clippy::too_many_arguments)]
fn subject_step(
    model: &mut GanModel,
    x: &BrainGraph,
    cbt: &Cbt,
    config: &TrainConfig,
    adam_n: &mut [AdamState],
    adam_d: &mut [AdamState],
    rng: &mut ChaCha8Rng,
    epoch: usize,
    subject: usize,
) -> Result<(f64, f64, f64), GanError> {
    let n_r = model.n_r();
    let check = |loss: &'static str, value: f64| {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(GanError::NonFiniteLoss { epoch, subject, loss, value })
        }
    };
    let step_err = |source: AdamError| GanError::TrainingStep { epoch, subject, source };

    // Normalizer forward (training mode); its tape stays alive for phase two.
    let mut tape_n = Tape::new();
    let common_n = TapeCommon::new(&mut tape_n, n_r);
    let x_node = tape_n.constant(x.weights().clone());
    let bound_n = model.normalizer.bind(&mut tape_n, true);
    let norm = model.normalizer.forward(&mut tape_n, &bound_n, &common_n, x_node, Mode::Train, rng)?;
    let fake_value = tape_n.value(norm.graph).clone();
    for (layer, node) in [
        (&mut model.normalizer.enc1, norm.bn_enc1),
        (&mut model.normalizer.enc2, norm.bn_enc2),
        (&mut model.normalizer.dec, norm.bn_dec),
    ] {
        if let (Some(state), Some(node)) = (layer.norm.as_mut(), node) {
            let (mean, var) = tape_n.batch_norm_stats(node).expect("train-mode norm node");
            state.absorb(&mean.clone(), &var.clone());
        }
    }

    // Discriminator step on a fresh tape, fake detached to a constant.
    let mut tape_d = Tape::new();
    let common_d = TapeCommon::new(&mut tape_d, n_r);
    let bound_d = model.discriminator.bind(&mut tape_d, true);
    let template = tape_d.constant(cbt.template().weights().clone());
    let real =
        model.discriminator.forward(&mut tape_d, &bound_d, &common_d, template, template, Mode::Train, rng)?;
    let fake_const = tape_d.constant(fake_value);
    let fake =
        model.discriminator.forward(&mut tape_d, &bound_d, &common_d, fake_const, template, Mode::Train, rng)?;
    let l_d = discriminator_loss(&mut tape_d, real.score, fake.score)?;
    let l_d_value = check("discriminator loss", tape_d.value(l_d).get(0, 0))?;
    let grads_d = tape_d.backward(l_d)?;
    apply_steps(
        model.discriminator_trainable_mut(),
        &bound_d.param_ids(),
        &grads_d,
        &tape_d,
        adam_d,
    )
    .map_err(step_err)?;
    for node in [real.bn_layer1, fake.bn_layer1].into_iter().flatten() {
        if let Some(state) = model.discriminator.layer1.norm.as_mut() {
            let (mean, var) = tape_d.batch_norm_stats(node).expect("train-mode norm node");
            state.absorb(&mean.clone(), &var.clone());
        }
    }

    // Normalizer step through the updated discriminator, which joins the
    // normalizer's tape as fixed constants.
    let bound_d_frozen = model.discriminator.bind(&mut tape_n, false);
    let template_n = tape_n.constant(cbt.template().weights().clone());
    let fake_scored = model.discriminator.forward(
        &mut tape_n,
        &bound_d_frozen,
        &common_n,
        norm.graph,
        template_n,
        Mode::Train,
        rng,
    )?;
    let (l_n, l1) = normalizer_loss(&mut tape_n, fake_scored.score, norm.graph, x_node, config.lambda)?;
    let l_n_value = check("normalizer loss", tape_n.value(l_n).get(0, 0))?;
    let l1_value = check("reconstruction loss", tape_n.value(l1).get(0, 0))?;
    let grads_n = tape_n.backward(l_n)?;
    apply_steps(model.normalizer_trainable_mut(), &bound_n.param_ids(), &grads_n, &tape_n, adam_n)
        .map_err(step_err)?;
    if let Some(node) = fake_scored.bn_layer1 {
        if let Some(state) = model.discriminator.layer1.norm.as_mut() {
            let (mean, var) = tape_n.batch_norm_stats(node).expect("train-mode norm node");
            state.absorb(&mean.clone(), &var.clone());
        }
    }
    Ok((l_d_value, l_n_value, l1_value))
}
