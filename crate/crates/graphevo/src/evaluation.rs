//! Forecast accuracy evaluation.
//!
//! Mean absolute error between predicted and true follow-up graphs, swept
//! over the neighbor count k, for four selection strategies sharing one
//! top-k/prediction pipeline:
//!
//! * `SS-OF` — dot products of the vectorized baseline graphs;
//! * `SS-CR` — dot products of vectorized-graph deviations from the template;
//! * `SS-CE` — dot products of raw encoder embeddings;
//! * `Ours`  — dot products of embedding deviations from the template's
//!   self-embedding (the full method).
//!
//! Reports aggregate per-k accuracy into mean ± std and best-k cells per
//! follow-up timepoint, either on a fixed train/test split or with seeded
//! k-fold cross-validation over the training subjects.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cbt::Cbt;
use crate::gan::{self, GanError, Normalizer, TrainConfig};
use crate::graph::{BrainGraph, GraphError, LongitudinalDataset, SubjectTrajectory};
use crate::io;
use crate::matrix::Matrix;
use crate::selection::{self, Embedding, SelectionError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("graphs have {got} and {expected} regions")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("{side} set is empty")]
    EmptySet { side: &'static str },
    #[error("{folds} folds need at least {folds} training subjects, got {n}")]
    FoldsOutOfRange { folds: usize, n: usize },
    #[error("k = {k} exceeds the {n} available training subjects")]
    KOutOfRange { k: usize, n: usize },
    #[error("no k values requested")]
    EmptyKRange,
    #[error("subject {id} has no ground-truth graph at timepoint {timepoint}")]
    MissingTruth { id: String, timepoint: usize },
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Mean absolute difference over all n_r² cells (diagonal and both
/// triangles included, so the convention is uniform across methods).
pub fn mae(a: &BrainGraph, b: &BrainGraph) -> Result<f64, EvalError> {
    if a.n_r() != b.n_r() {
        return Err(EvalError::ShapeMismatch { got: a.n_r(), expected: b.n_r() });
    }
    let n = a.n_r();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += (a.weights().get(i, j) - b.weights().get(i, j)).abs();
        }
    }
    Ok(sum / (n * n) as f64)
}

// ── Selection strategies ─────────────────────────────────────────────────────

/// The four neighbor-selection strategies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    /// Vectorized baseline graphs, raw dot products.
    OriginalFeatures,
    /// Vectorized-graph deviation from the template, then dot products.
    GraphResidual,
    /// Encoder embeddings, raw dot products.
    GraphEmbedding,
    /// Embedding deviation from the template's self-embedding (full method).
    EmbeddedResidual,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 4] = [
        SelectionMethod::OriginalFeatures,
        SelectionMethod::GraphResidual,
        SelectionMethod::GraphEmbedding,
        SelectionMethod::EmbeddedResidual,
    ];

    /// Report label.
    pub fn label(self) -> &'static str {
        match self {
            SelectionMethod::OriginalFeatures => "SS-OF",
            SelectionMethod::GraphResidual => "SS-CR",
            SelectionMethod::GraphEmbedding => "SS-CE",
            SelectionMethod::EmbeddedResidual => "Ours",
        }
    }
}

fn dot_matrix(test: &[Vec<f64>], train: &[Vec<f64>]) -> Result<Matrix, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet { side: "test" });
    }
    if train.is_empty() {
        return Err(EvalError::EmptySet { side: "training" });
    }
    let len = test[0].len();
    for v in test.iter().chain(train) {
        if v.len() != len {
            return Err(EvalError::ShapeMismatch { got: v.len(), expected: len });
        }
    }
    Ok(Matrix::from_fn(test.len(), train.len(), |i, j| {
        test[i].iter().zip(&train[j]).map(|(a, b)| a * b).sum()
    }))
}

/// `SS-OF`: similarity of raw vectorized baselines.
pub fn select_original_features(
    test: &[&BrainGraph],
    train: &[&BrainGraph],
) -> Result<Matrix, EvalError> {
    let t: Vec<Vec<f64>> = test.iter().map(|g| g.vectorize()).collect();
    let r: Vec<Vec<f64>> = train.iter().map(|g| g.vectorize()).collect();
    dot_matrix(&t, &r)
}

/// `SS-CR`: similarity of vectorized-graph deviations from the template.
pub fn select_graph_residual(
    test: &[&BrainGraph],
    train: &[&BrainGraph],
    cbt: &Cbt,
) -> Result<Matrix, EvalError> {
    let center = cbt.template().vectorize();
    let dev = |g: &&BrainGraph| -> Vec<f64> {
        g.vectorize().iter().zip(&center).map(|(a, b)| (a - b).abs()).collect()
    };
    let t: Vec<Vec<f64>> = test.iter().map(dev).collect();
    let r: Vec<Vec<f64>> = train.iter().map(dev).collect();
    dot_matrix(&t, &r)
}

/// `SS-CE`: similarity of raw encoder embeddings (no template subtraction).
pub fn select_graph_embedding(
    test: &[&BrainGraph],
    train: &[&BrainGraph],
    normalizer: &Normalizer,
) -> Result<Matrix, EvalError> {
    let embed = |graphs: &[&BrainGraph]| -> Result<Vec<Vec<f64>>, EvalError> {
        graphs.iter().map(|g| Ok(normalizer.embed(g)?)).collect()
    };
    let t = embed(test)?;
    let r = embed(train)?;
    dot_matrix(&t, &r)
}

/// Full method: similarity of embedding deviations from the template's
/// self-embedding, via the selection pipeline.
pub fn select_embedded_residual(
    test: &[&BrainGraph],
    train: &[&BrainGraph],
    normalizer: &Normalizer,
    cbt: &Cbt,
    normalize_residuals: bool,
) -> Result<Matrix, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet { side: "test" });
    }
    if train.is_empty() {
        return Err(EvalError::EmptySet { side: "training" });
    }
    let center = Embedding::new(normalizer.embed(cbt.template())?)?;
    let residuals = |graphs: &[&BrainGraph]| -> Result<Vec<_>, EvalError> {
        graphs
            .iter()
            .map(|g| {
                let z = Embedding::new(normalizer.embed(g)?)?;
                Ok(selection::residual(&z, &center)?)
            })
            .collect()
    };
    let t = residuals(test)?;
    let r = residuals(train)?;
    Ok(selection::similarity_matrix(&t, &r, normalize_residuals)?)
}

/// Dispatches one strategy to its similarity matrix.
pub fn method_similarity(
    method: SelectionMethod,
    test: &[&BrainGraph],
    train: &[&BrainGraph],
    normalizer: &Normalizer,
    cbt: &Cbt,
    normalize_residuals: bool,
) -> Result<Matrix, EvalError> {
    match method {
        SelectionMethod::OriginalFeatures => select_original_features(test, train),
        SelectionMethod::GraphResidual => select_graph_residual(test, train, cbt),
        SelectionMethod::GraphEmbedding => select_graph_embedding(test, train, normalizer),
        SelectionMethod::EmbeddedResidual => {
            select_embedded_residual(test, train, normalizer, cbt, normalize_residuals)
        }
    }
}

// ── k-sweep ──────────────────────────────────────────────────────────────────

/// For each k and follow-up timepoint, the MAE averaged over test subjects;
/// selection and prediction run through the shared top-k pipeline, so the
/// strategy enters only through `similarity`.
pub fn k_sweep(
    similarity: &Matrix,
    train: &[&SubjectTrajectory],
    test: &[&SubjectTrajectory],
    k_values: &[usize],
    timepoints: &[usize],
) -> Result<Vec<Vec<f64>>, EvalError> {
    if k_values.is_empty() {
        return Err(EvalError::EmptyKRange);
    }
    if test.is_empty() {
        return Err(EvalError::EmptySet { side: "test" });
    }
    for &k in k_values {
        if k < 1 || k > train.len() {
            return Err(EvalError::KOutOfRange { k, n: train.len() });
        }
    }
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut sums = vec![0.0; timepoints.len()];
        for (i, subject) in test.iter().enumerate() {
            let neighbors = selection::top_k(similarity, i, k)?;
            let predictions = selection::predict_trajectory(train, &neighbors, timepoints)?;
            for (slot, (&t, prediction)) in timepoints.iter().zip(&predictions).enumerate().map(|(s, p)| (s, p)) {
                let truth = subject.graph(t).ok_or_else(|| EvalError::MissingTruth {
                    id: subject.id().to_string(),
                    timepoint: t,
                })?;
                sums[slot] += mae(prediction, truth)?;
            }
        }
        out.push(sums.into_iter().map(|s| s / test.len() as f64).collect());
    }
    Ok(out)
}

/// Select-all baseline: every test subject is forecast as the element-wise
/// mean of *all* training subjects (k = n); returns per-timepoint MAE.
pub fn select_all_baseline(
    train: &[&SubjectTrajectory],
    test: &[&SubjectTrajectory],
    timepoints: &[usize],
) -> Result<Vec<f64>, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptySet { side: "training" });
    }
    if test.is_empty() {
        return Err(EvalError::EmptySet { side: "test" });
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let predictions = selection::predict_trajectory(train, &all, timepoints)?;
    let mut out = Vec::with_capacity(timepoints.len());
    for (slot, &t) in timepoints.iter().enumerate() {
        let mut sum = 0.0;
        for subject in test {
            let truth = subject.graph(t).ok_or_else(|| EvalError::MissingTruth {
                id: subject.id().to_string(),
                timepoint: t,
            })?;
            sum += mae(&predictions[slot], truth)?;
        }
        out.push(sum / test.len() as f64);
    }
    Ok(out)
}

// ── Reports ──────────────────────────────────────────────────────────────────

/// One raw measurement: a method's MAE at one (fold, k, timepoint).
#[derive(Debug, Clone, PartialEq)]
pub struct RawMae {
    pub method: SelectionMethod,
    pub fold: usize,
    pub k: usize,
    pub timepoint: usize,
    pub mae: f64,
}

/// Aggregated accuracy of one method at one timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub timepoint: usize,
    /// Mean over k of the fold-averaged MAE.
    pub mean: f64,
    /// Population std across k of the fold-averaged MAE.
    pub std_across_k: f64,
    /// Population std across all (fold, k) measurements jointly.
    pub std_joint: f64,
    /// Minimum over k of the fold-averaged MAE; never exceeds `mean`.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: SelectionMethod,
    pub per_timepoint: Vec<CellSummary>,
}

/// Complete evaluation output: aggregate cells, raw measurements, and the
/// fold assignment that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub folds: usize,
    pub k_values: Vec<usize>,
    /// Follow-up timepoints evaluated (baseline excluded).
    pub timepoints: Vec<usize>,
    /// Subject id → fold index (fold 0 holds everything in split mode).
    pub fold_assignments: Vec<(String, usize)>,
    pub methods: Vec<MethodReport>,
    pub raw: Vec<RawMae>,
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

fn summarize(raw: &[RawMae], k_values: &[usize], timepoints: &[usize]) -> Vec<MethodReport> {
    SelectionMethod::ALL
        .iter()
        .map(|&method| {
            let per_timepoint = timepoints
                .iter()
                .map(|&t| {
                    let fold_means: Vec<f64> = k_values
                        .iter()
                        .map(|&k| {
                            let cells: Vec<f64> = raw
                                .iter()
                                .filter(|r| r.method == method && r.k == k && r.timepoint == t)
                                .map(|r| r.mae)
                                .collect();
                            cells.iter().sum::<f64>() / cells.len() as f64
                        })
                        .collect();
                    let mean = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
                    let joint: Vec<f64> = raw
                        .iter()
                        .filter(|r| r.method == method && r.timepoint == t)
                        .map(|r| r.mae)
                        .collect();
                    let joint_mean = joint.iter().sum::<f64>() / joint.len() as f64;
                    CellSummary {
                        timepoint: t,
                        mean,
                        std_across_k: population_std(&fold_means, mean),
                        std_joint: population_std(&joint, joint_mean),
                        best: fold_means.iter().copied().fold(f64::INFINITY, f64::min),
                    }
                })
                .collect();
            MethodReport { method, per_timepoint }
        })
        .collect()
}

/// Evaluates all four strategies for one trained model on one train/test
/// partition; returns raw (k, timepoint) measurements per method.
pub fn evaluate_methods(
    normalizer: &Normalizer,
    cbt: &Cbt,
    train: &[&SubjectTrajectory],
    test: &[&SubjectTrajectory],
    k_values: &[usize],
    timepoints: &[usize],
    normalize_residuals: bool,
) -> Result<Vec<(SelectionMethod, Vec<Vec<f64>>)>, EvalError> {
    let train_t0: Vec<&BrainGraph> = train.iter().map(|s| s.baseline()).collect();
    let test_t0: Vec<&BrainGraph> = test.iter().map(|s| s.baseline()).collect();
    SelectionMethod::ALL
        .iter()
        .map(|&method| {
            let sim =
                method_similarity(method, &test_t0, &train_t0, normalizer, cbt, normalize_residuals)?;
            let per_k = k_sweep(&sim, train, test, k_values, timepoints)?;
            Ok((method, per_k))
        })
        .collect()
}

/// Shared evaluation settings for split and cross-validated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub folds: usize,
    pub k_values: Vec<usize>,
    pub train: TrainConfig,
    pub normalize_residuals: bool,
    /// Seeds the fold assignment; fold f trains with `train.seed + f`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            k_values: (2..=10).collect(),
            train: TrainConfig::default(),
            normalize_residuals: false,
            seed: 0,
        }
    }
}

fn follow_up_timepoints(dataset: &LongitudinalDataset) -> Vec<usize> {
    (1..dataset.n_timepoints()).collect()
}

/// Trains once on the train-tagged subjects and evaluates on the test-tagged
/// subjects (fold 0 holds every subject).
pub fn evaluate_split(
    dataset: &LongitudinalDataset,
    cbt: &Cbt,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if config.k_values.is_empty() {
        return Err(EvalError::EmptyKRange);
    }
    let train: Vec<&SubjectTrajectory> =
        dataset.train_indices().into_iter().map(|i| dataset.subject(i)).collect();
    let test: Vec<&SubjectTrajectory> =
        dataset.test_indices().into_iter().map(|i| dataset.subject(i)).collect();
    if train.is_empty() {
        return Err(EvalError::EmptySet { side: "training" });
    }
    if test.is_empty() {
        return Err(EvalError::EmptySet { side: "test" });
    }
    let timepoints = follow_up_timepoints(dataset);
    let baselines: Vec<&BrainGraph> = train.iter().map(|s| s.baseline()).collect();
    let (model, _) = gan::train(&baselines, cbt, &config.train)?;
    let evals = evaluate_methods(
        &model.normalizer,
        cbt,
        &train,
        &test,
        &config.k_values,
        &timepoints,
        config.normalize_residuals,
    )?;
    let mut raw = Vec::new();
    for (method, per_k) in &evals {
        for (ki, &k) in config.k_values.iter().enumerate() {
            for (ti, &t) in timepoints.iter().enumerate() {
                raw.push(RawMae { method: *method, fold: 0, k, timepoint: t, mae: per_k[ki][ti] });
            }
        }
    }
    let methods = summarize(&raw, &config.k_values, &timepoints);
    Ok(EvalReport {
        seed: config.seed,
        folds: 1,
        k_values: config.k_values.clone(),
        timepoints,
        fold_assignments: dataset.subjects().iter().map(|s| (s.id().to_string(), 0)).collect(),
        methods,
        raw,
    })
}

/// Seeded k-fold cross-validation over the train-tagged subjects: each fold
/// is held out as the test set while the remaining folds train the model.
pub fn cross_validate(
    dataset: &LongitudinalDataset,
    cbt: &Cbt,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if config.k_values.is_empty() {
        return Err(EvalError::EmptyKRange);
    }
    let train_indices = dataset.train_indices();
    let n = train_indices.len();
    if config.folds < 2 || config.folds > n {
        return Err(EvalError::FoldsOutOfRange { folds: config.folds, n });
    }
    // Seeded shuffle, then round-robin deal: fold sizes differ by at most 1.
    let mut shuffled = train_indices.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffled.shuffle(&mut rng);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); config.folds];
    for (i, subject) in shuffled.into_iter().enumerate() {
        folds[i % config.folds].push(subject);
    }
    let max_k = config.k_values.iter().copied().max().expect("non-empty");
    let timepoints = follow_up_timepoints(dataset);
    let mut raw = Vec::new();
    let mut fold_assignments = Vec::new();
    for (f, held_out) in folds.iter().enumerate() {
        for &subject in held_out {
            fold_assignments.push((dataset.subject(subject).id().to_string(), f));
        }
        let in_fold: Vec<&SubjectTrajectory> = folds
            .iter()
            .enumerate()
            .filter(|(other, _)| *other != f)
            .flat_map(|(_, members)| members.iter().map(|&i| dataset.subject(i)))
            .collect();
        if max_k > in_fold.len() {
            return Err(EvalError::KOutOfRange { k: max_k, n: in_fold.len() });
        }
        let test: Vec<&SubjectTrajectory> =
            held_out.iter().map(|&i| dataset.subject(i)).collect();
        let baselines: Vec<&BrainGraph> = in_fold.iter().map(|s| s.baseline()).collect();
        let fold_train =
            TrainConfig { seed: config.train.seed + f as u64, ..config.train.clone() };
        let (model, _) = gan::train(&baselines, cbt, &fold_train)?;
        let evals = evaluate_methods(
            &model.normalizer,
            cbt,
            &in_fold,
            &test,
            &config.k_values,
            &timepoints,
            config.normalize_residuals,
        )?;
        for (method, per_k) in &evals {
            for (ki, &k) in config.k_values.iter().enumerate() {
                for (ti, &t) in timepoints.iter().enumerate() {
                    raw.push(RawMae {
                        method: *method,
                        fold: f,
                        k,
                        timepoint: t,
                        mae: per_k[ki][ti],
                    });
                }
            }
        }
    }
    fold_assignments.sort();
    let methods = summarize(&raw, &config.k_values, &timepoints);
    Ok(EvalReport {
        seed: config.seed,
        folds: config.folds,
        k_values: config.k_values.clone(),
        timepoints,
        fold_assignments,
        methods,
        raw,
    })
}

// ── Serialization ────────────────────────────────────────────────────────────

/// Aggregate table: one row per method with `mean ± std` and `best`
/// columns per timepoint (the spread across k of the fold-averaged MAE).
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut header = String::from("method");
    for t in &report.timepoints {
        for col in ["mean_mae", "std_mae", "best_mae"] {
            header.push_str(&format!(",t{t}_{col}"));
        }
    }
    let mut out = header;
    out.push('\n');
    for method in &report.methods {
        out.push_str(method.method.label());
        for cell in &method.per_timepoint {
            for v in [cell.mean, cell.std_across_k, cell.best] {
                out.push(',');
                out.push_str(&io::format_value(v));
            }
        }
        out.push('\n');
    }
    out
}

/// Machine-readable breakdown: one row per (method, fold, k, timepoint).
pub fn per_k_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,fold,k,timepoint,mae\n");
    for r in &report.raw {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method.label(),
            r.fold,
            r.k,
            r.timepoint,
            io::format_value(r.mae)
        ));
    }
    out
}

// ── Reference accuracy ───────────────────────────────────────────────────────

/// Accuracy previously measured on a real 35-region clinical cohort
/// (OASIS-2-derived morphological networks, 3-fold cross-validation,
/// k ∈ 2..10). Recorded for orientation only: synthetic cohorts cannot
/// reproduce these numbers and no test asserts them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceAccuracy {
    pub method: SelectionMethod,
    pub t1_mean: f64,
    pub t1_std: f64,
    pub t1_best: f64,
    pub t2_mean: f64,
    pub t2_std: f64,
    pub t2_best: f64,
}

pub const REFERENCE_ACCURACY: [ReferenceAccuracy; 4] = [
    ReferenceAccuracy {
        method: SelectionMethod::OriginalFeatures,
        t1_mean: 0.04469,
        t1_std: 0.00247,
        t1_best: 0.04194,
        t2_mean: 0.05368,
        t2_std: 0.00449,
        t2_best: 0.04825,
    },
    ReferenceAccuracy {
        method: SelectionMethod::GraphResidual,
        t1_mean: 0.04417,
        t1_std: 0.002026,
        t1_best: 0.04225,
        t2_mean: 0.05045,
        t2_std: 0.000942,
        t2_best: 0.04939,
    },
    ReferenceAccuracy {
        method: SelectionMethod::GraphEmbedding,
        t1_mean: 0.04255,
        t1_std: 0.001835,
        t1_best: 0.04064,
        t2_mean: 0.04948,
        t2_std: 0.00248,
        t2_best: 0.04707,
    },
    ReferenceAccuracy {
        method: SelectionMethod::EmbeddedResidual,
        t1_mean: 0.04237,
        t1_std: 0.001679,
        t1_best: 0.04075,
        t2_mean: 0.04882,
        t2_std: 0.002517,
        t2_best: 0.04624,
    },
];
