//! Seeded synthetic longitudinal cohorts with planted cluster structure.
//!
//! Each cluster owns a random symmetric centroid graph and a smooth drift
//! field. A subject is its centroid plus subject-specific symmetric noise
//! drawn once at baseline; follow-up `t_j` adds the cluster's drift scaled by
//! `j·δ`, so cluster-mates share a trajectory shape — the premise that makes
//! neighbor-averaged forecasting work, here testably true by construction.
//! Values are clamped to `[0,1]` (clamps are counted so exactness-sensitive
//! tests can require none) and diagonals stay zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{BrainGraph, GraphError, LongitudinalDataset, Split, SubjectTrajectory};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {field} = {value}")]
    InvalidConfig { field: &'static str, value: f64 },
    #[error("{n_subjects} subjects cannot cover {n_clusters} clusters")]
    TooFewSubjects { n_subjects: usize, n_clusters: usize },
    #[error("{got} cluster labels for {expected} subjects")]
    ClusterLabelCount { got: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Generator settings. Defaults produce the 35-region, 3-cluster cohort used
/// by the acceptance suite: 75 longitudinal subjects (80% train), 23 extra
/// baseline-only subjects for template building, 3 visits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Longitudinal subjects (before the train/test split).
    pub n_subjects: usize,
    pub n_r: usize,
    /// Visits per subject, baseline included (T+1).
    pub n_timepoints: usize,
    pub n_clusters: usize,
    /// Within-cluster noise level (standard deviation).
    pub sigma: f64,
    /// Per-visit drift magnitude.
    pub delta: f64,
    pub train_fraction: f64,
    /// Extra baseline-only subjects, generated independently of the
    /// longitudinal cohort, reserved for template construction.
    pub n_independent: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 75,
            n_r: 35,
            n_timepoints: 3,
            n_clusters: 3,
            sigma: 0.02,
            delta: 0.03,
            train_fraction: 0.8,
            n_independent: 23,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, value| Err(SynthError::InvalidConfig { field, value });
        if self.n_r < 2 {
            return bad("n_r", self.n_r as f64);
        }
        if self.n_timepoints < 1 {
            return bad("n_timepoints", self.n_timepoints as f64);
        }
        if self.n_clusters < 1 {
            return bad("n_clusters", self.n_clusters as f64);
        }
        if self.n_subjects < self.n_clusters {
            return Err(SynthError::TooFewSubjects {
                n_subjects: self.n_subjects,
                n_clusters: self.n_clusters,
            });
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", self.sigma);
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta", self.delta);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", self.train_fraction);
        }
        Ok(())
    }
}

/// A generated cohort plus its ground truth and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Longitudinal subjects `s000…`, all initially tagged train;
    /// apply [`split`] afterwards.
    pub dataset: LongitudinalDataset,
    pub centroids: Vec<BrainGraph>,
    /// Cluster index per dataset subject, in subject order.
    pub cluster_assignments: Vec<usize>,
    /// Baseline-only template-building subjects `ind000…`.
    pub independent: Vec<(String, BrainGraph)>,
    /// Strict-upper-triangle cells that had to be clamped into [0,1].
    pub clamp_count: usize,
}

/// Symmetric zero-diagonal matrix with strict-upper entries from `f`,
/// drawn row-major.
fn symmetric_from(n: usize, mut f: impl FnMut() -> f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = f();
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

/// Deterministically generates the cohort. Clusters are assigned round-robin
/// (`subject % n_clusters`), continuing through the independent subjects so
/// the template population mirrors the cohort's structure. Draw order:
/// centroids, then drift fields, then per-subject noise.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_r;
    let noise = Normal::new(0.0, config.sigma)
        .map_err(|_| SynthError::InvalidConfig { field: "sigma", value: config.sigma })?;
    let centroids: Vec<Matrix> = (0..config.n_clusters)
        .map(|_| symmetric_from(n, || rng.random_range(0.1..0.9)))
        .collect();
    let drifts: Vec<Matrix> = (0..config.n_clusters)
        .map(|_| symmetric_from(n, || rng.random_range(-1.0..1.0)))
        .collect();

    let mut clamp_count = 0usize;
    let mut subject_graphs = |cluster: usize, rng: &mut ChaCha8Rng, visits: usize| -> Result<Vec<BrainGraph>, SynthError> {
        let noise_field = symmetric_from(n, || noise.sample(rng));
        let mut graphs = Vec::with_capacity(visits);
        for visit in 0..visits {
            let scale = visit as f64 * config.delta;
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let raw = centroids[cluster].get(i, j)
                        + noise_field.get(i, j)
                        + scale * drifts[cluster].get(i, j);
                    let v = raw.clamp(0.0, 1.0);
                    if v != raw {
                        clamp_count += 1;
                    }
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            graphs.push(BrainGraph::new(m)?);
        }
        Ok(graphs)
    };

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut cluster_assignments = Vec::with_capacity(config.n_subjects);
    for s in 0..config.n_subjects {
        let cluster = s % config.n_clusters;
        cluster_assignments.push(cluster);
        let graphs = subject_graphs(cluster, &mut rng, config.n_timepoints)?;
        let trajectory = SubjectTrajectory::new(
            format!("s{s:03}"),
            Split::Train,
            graphs.into_iter().map(Some).collect(),
        )?;
        subjects.push(trajectory);
    }
    let mut independent = Vec::with_capacity(config.n_independent);
    for s in 0..config.n_independent {
        let cluster = (config.n_subjects + s) % config.n_clusters;
        let graphs = subject_graphs(cluster, &mut rng, 1)?;
        independent.push((format!("ind{s:03}"), graphs.into_iter().next().expect("one visit")));
    }
    let centroids = centroids
        .into_iter()
        .map(BrainGraph::new)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SynthOutput {
        dataset: LongitudinalDataset::new(subjects)?,
        centroids,
        cluster_assignments,
        independent,
        clamp_count,
    })
}

/// Seeded, cluster-stratified train/test split. The training head count is
/// `round(fraction · n)`, apportioned to clusters by largest remainder;
/// members are shuffled within each cluster before the cut. Returns the
/// re-tagged dataset plus warnings for clusters that ended up absent from
/// training (a warning, never an error).
pub fn split(
    dataset: &LongitudinalDataset,
    clusters: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(LongitudinalDataset, Vec<String>), SynthError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::InvalidConfig { field: "train_fraction", value: fraction });
    }
    let n = dataset.subjects().len();
    if clusters.len() != n {
        return Err(SynthError::ClusterLabelCount { got: clusters.len(), expected: n });
    }
    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (subject, &cluster) in clusters.iter().enumerate() {
        members[cluster].push(subject);
    }
    let n_train = (fraction * n as f64).round() as usize;

    // Largest-remainder apportionment of the training quota across clusters.
    let ideals: Vec<f64> =
        members.iter().map(|m| n_train as f64 * m.len() as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = ideals.iter().map(|v| v.floor() as usize).collect();
    let mut leftover = n_train - quotas.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..n_clusters).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &cluster in &by_remainder {
        if leftover == 0 {
            break;
        }
        if quotas[cluster] < members[cluster].len() {
            quotas[cluster] += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Test; n];
    let mut warnings = Vec::new();
    for (cluster, list) in members.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let mut shuffled = list.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        for &subject in shuffled.iter().take(quotas[cluster]) {
            splits[subject] = Split::Train;
        }
        if quotas[cluster] == 0 {
            warnings.push(format!("cluster {cluster} has no training subjects"));
        }
    }
    Ok((dataset.with_splits(&splits)?, warnings))
}
