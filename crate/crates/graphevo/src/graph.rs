//! Core domain types: weighted brain connectivity graphs, per-subject
//! longitudinal trajectories, and train/test datasets.
//!
//! A connectivity graph is a symmetric `n_r x n_r` matrix of morphological
//! connection weights in `[0, 1]` with a zero diagonal. Validation is strict:
//! asymmetric input is rejected, never silently symmetrized, and every
//! rejection names the offending cell.

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("connectivity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("asymmetric weights at ({row},{col}): {forward} vs mirrored {backward}")]
    Asymmetric { row: usize, col: usize, forward: f64, backward: f64 },
    #[error("weight at ({row},{col}) = {value} outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("diagonal entry at ({index},{index}) = {value} must be 0")]
    NonzeroDiagonal { index: usize, value: f64 },
    #[error("vector length {len} does not match upper triangle of an {n_r}-region graph ({expected})")]
    BadVectorLength { len: usize, n_r: usize, expected: usize },
    #[error("subject id {id:?} is invalid: ids must be non-empty and use only [A-Za-z0-9_-]")]
    BadSubjectId { id: String },
    #[error("subject {id}: baseline timepoint t0 is required")]
    MissingBaseline { id: String },
    #[error("training subject {id} is missing timepoint t{timepoint}")]
    MissingTimepoint { id: String, timepoint: usize },
    #[error("subject {id}: graph at timepoint t{timepoint} has {got} regions, expected {expected}")]
    InconsistentSize { id: String, timepoint: usize, got: usize, expected: usize },
    #[error("dataset must contain at least one subject")]
    EmptyDataset,
    #[error("duplicate subject id {id}")]
    DuplicateSubject { id: String },
    #[error("subject {id} declares {got} timepoints, dataset has {expected}")]
    TimepointCountMismatch { id: String, got: usize, expected: usize },
    #[error("cannot average an empty list of graphs")]
    EmptyMean,
    #[error("{path}: {message} (line {line})")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which side of the train/test divide a subject belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Symmetric, zero-diagonal connectivity matrix with weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainGraph {
    weights: Matrix,
}

impl BrainGraph {
    /// Validates and wraps a weight matrix. Symmetry must hold exactly as
    /// stored; near-symmetric input is an error, not something to repair.
    pub fn new(weights: Matrix) -> Result<Self, GraphError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            let d = weights.get(i, i);
            if d != 0.0 {
                return Err(GraphError::NonzeroDiagonal { index: i, value: d });
            }
            for j in 0..cols {
                let v = weights.get(i, j);
                if !(v >= 0.0 && v <= 1.0) {
                    return Err(GraphError::OutOfRange { row: i, col: j, value: v });
                }
                if j > i {
                    let w = weights.get(j, i);
                    if v != w {
                        return Err(GraphError::Asymmetric { row: i, col: j, forward: v, backward: w });
                    }
                }
            }
        }
        Ok(BrainGraph { weights })
    }

    pub fn n_r(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Strict upper triangle in row-major order:
    /// `(0,1), (0,2), …, (0,n-1), (1,2), …` — length `n_r (n_r - 1) / 2`.
    pub fn vectorize(&self) -> Vec<f64> {
        let n = self.n_r();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.weights.get(i, j));
            }
        }
        out
    }

    /// Rebuilds a graph from its [`BrainGraph::vectorize`] output.
    pub fn from_upper_vector(n_r: usize, values: &[f64]) -> Result<Self, GraphError> {
        let expected = n_r * n_r.saturating_sub(1) / 2;
        if values.len() != expected {
            return Err(GraphError::BadVectorLength { len: values.len(), n_r, expected });
        }
        let mut m = Matrix::zeros(n_r, n_r);
        let mut it = values.iter();
        for i in 0..n_r {
            for j in (i + 1)..n_r {
                let v = *it.next().expect("length checked above");
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        BrainGraph::new(m)
    }

    /// Element-wise mean of a non-empty set of same-sized graphs. Stays a
    /// valid graph: the convex combination preserves range, symmetry, and the
    /// zero diagonal.
    pub fn mean_of(graphs: &[&BrainGraph]) -> Result<Self, GraphError> {
        let first = graphs.first().ok_or(GraphError::EmptyMean)?;
        let n = first.n_r();
        let mut acc = Matrix::zeros(n, n);
        for g in graphs {
            acc.add_assign(g.weights());
        }
        BrainGraph::new(acc.scale(1.0 / graphs.len() as f64))
    }
}

/// One subject across the longitudinal acquisition: a graph per timepoint,
/// baseline always present, later visits possibly absent for test subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrajectory {
    id: String,
    split: Split,
    graphs: Vec<Option<BrainGraph>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl SubjectTrajectory {
    /// `graphs[t]` holds the subject's graph at timepoint `t`. Baseline
    /// (`t = 0`) must be present; training subjects must be complete.
    pub fn new(id: String, split: Split, graphs: Vec<Option<BrainGraph>>) -> Result<Self, GraphError> {
        if !valid_id(&id) {
            return Err(GraphError::BadSubjectId { id });
        }
        let Some(Some(baseline)) = graphs.first() else {
            return Err(GraphError::MissingBaseline { id });
        };
        let n_r = baseline.n_r();
        for (t, slot) in graphs.iter().enumerate() {
            match slot {
                Some(g) if g.n_r() != n_r => {
                    return Err(GraphError::InconsistentSize { id, timepoint: t, got: g.n_r(), expected: n_r })
                }
                None if split == Split::Train => return Err(GraphError::MissingTimepoint { id, timepoint: t }),
                _ => {}
            }
        }
        Ok(SubjectTrajectory { id, split, graphs })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn baseline(&self) -> &BrainGraph {
        self.graphs[0].as_ref().expect("baseline presence is validated at construction")
    }

    pub fn graph(&self, timepoint: usize) -> Option<&BrainGraph> {
        self.graphs.get(timepoint).and_then(|g| g.as_ref())
    }

    pub fn timepoint_count(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_r(&self) -> usize {
        self.baseline().n_r()
    }

    /// Re-tags the subject's split without touching the graphs.
    pub fn with_split(&self, split: Split) -> Result<Self, GraphError> {
        Self::new(self.id.clone(), split, self.graphs.clone())
    }
}

/// A cohort of subject trajectories sharing region count and timepoint grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    n_r: usize,
    n_timepoints: usize,
    subjects: Vec<SubjectTrajectory>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<SubjectTrajectory>) -> Result<Self, GraphError> {
        let first = subjects.first().ok_or(GraphError::EmptyDataset)?;
        let n_r = first.n_r();
        let n_timepoints = first.timepoint_count();
        let mut seen: Vec<&str> = Vec::with_capacity(subjects.len());
        for s in &subjects {
            if seen.contains(&s.id()) {
                return Err(GraphError::DuplicateSubject { id: s.id().to_string() });
            }
            seen.push(s.id());
            if s.timepoint_count() != n_timepoints {
                return Err(GraphError::TimepointCountMismatch {
                    id: s.id().to_string(),
                    got: s.timepoint_count(),
                    expected: n_timepoints,
                });
            }
            if s.n_r() != n_r {
                return Err(GraphError::InconsistentSize {
                    id: s.id().to_string(),
                    timepoint: 0,
                    got: s.n_r(),
                    expected: n_r,
                });
            }
        }
        Ok(LongitudinalDataset { n_r, n_timepoints, subjects })
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    /// Number of acquisition timepoints, baseline included (`T + 1`).
    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn subjects(&self) -> &[SubjectTrajectory] {
        &self.subjects
    }

    pub fn subject(&self, index: usize) -> &SubjectTrajectory {
        &self.subjects[index]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
    }

    fn indices_of(&self, split: Split) -> Vec<usize> {
        self.subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split() == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rebuilds the dataset with new split assignments, one per subject.
    pub fn with_splits(&self, splits: &[Split]) -> Result<Self, GraphError> {
        assert_eq!(splits.len(), self.subjects.len(), "one split tag per subject required");
        let subjects = self
            .subjects
            .iter()
            .zip(splits)
            .map(|(s, &tag)| s.with_split(tag))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(subjects)
    }
}
