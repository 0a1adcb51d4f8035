//! Residual similarity and neighbor-based trajectory forecasting.
//!
//! A subject's embedding is compared to the template's self-embedding; the
//! element-wise absolute difference (the *residual*) captures how the subject
//! deviates from the population center. Test subjects are matched to training
//! subjects by residual dot products, and a test subject's follow-up graphs
//! are forecast as the element-wise mean of its top-k neighbors' follow-ups.

use thiserror::Error;

use crate::graph::{BrainGraph, GraphError, SubjectTrajectory};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("vector length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("embedding entry {index} is not finite: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("residual list is empty")]
    Empty,
    #[error("row {row} out of range for {rows} test subjects")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("k = {k} outside valid range 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("neighbor index {index} out of range for {n} training subjects")]
    BadNeighbor { index: usize, n: usize },
    #[error("no neighbors selected")]
    NoNeighbors,
    #[error("training subject {id} has no graph at timepoint {timepoint}")]
    MissingTimepoint { id: String, timepoint: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-region encoder output for one graph, length n_r.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, SelectionError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(SelectionError::NonFinite { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Element-wise absolute deviation between an embedding and the template's
/// self-embedding; entries are nonnegative by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual(Vec<f64>);

impl Residual {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `|z − z_template|`, element-wise.
pub fn residual(z: &Embedding, z_template: &Embedding) -> Result<Residual, SelectionError> {
    if z.len() != z_template.len() {
        return Err(SelectionError::LengthMismatch { got: z.len(), expected: z_template.len() });
    }
    Ok(Residual(z.0.iter().zip(&z_template.0).map(|(a, b)| (a - b).abs()).collect()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity scores, one row per test subject, one column per training
/// subject: `S[i][j] = dot(test_i, train_j)`.
///
/// With `normalize` set, each residual is scaled to unit L2 norm first (so
/// scores become cosine similarities); an all-zero residual is left as-is.
pub fn similarity_matrix(
    test: &[Residual],
    train: &[Residual],
    normalize: bool,
) -> Result<Matrix, SelectionError> {
    if test.is_empty() || train.is_empty() {
        return Err(SelectionError::Empty);
    }
    let len = test[0].len();
    for r in test.iter().chain(train) {
        if r.len() != len {
            return Err(SelectionError::LengthMismatch { got: r.len(), expected: len });
        }
    }
    let unit = |r: &Residual| -> Vec<f64> {
        let norm = dot(&r.0, &r.0).sqrt();
        if normalize && norm > 0.0 {
            r.0.iter().map(|v| v / norm).collect()
        } else {
            r.0.clone()
        }
    };
    let test_rows: Vec<Vec<f64>> = test.iter().map(unit).collect();
    let train_rows: Vec<Vec<f64>> = train.iter().map(unit).collect();
    Ok(Matrix::from_fn(test.len(), train.len(), |i, j| dot(&test_rows[i], &train_rows[j])))
}

/// Indices of the `k` highest-scoring training subjects in row `row`,
/// descending by score; ties go to the lower training index.
pub fn top_k(similarity: &Matrix, row: usize, k: usize) -> Result<Vec<usize>, SelectionError> {
    if row >= similarity.rows() {
        return Err(SelectionError::RowOutOfRange { row, rows: similarity.rows() });
    }
    let n = similarity.cols();
    if k < 1 || k > n {
        return Err(SelectionError::KOutOfRange { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        similarity
            .get(row, b)
            .partial_cmp(&similarity.get(row, a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Element-wise mean of the selected neighbors' graphs at each requested
/// timepoint, in timepoint order.
pub fn predict_trajectory(
    train: &[&SubjectTrajectory],
    neighbors: &[usize],
    timepoints: &[usize],
) -> Result<Vec<BrainGraph>, SelectionError> {
    if neighbors.is_empty() {
        return Err(SelectionError::NoNeighbors);
    }
    for &j in neighbors {
        if j >= train.len() {
            return Err(SelectionError::BadNeighbor { index: j, n: train.len() });
        }
    }
    let mut out = Vec::with_capacity(timepoints.len());
    for &t in timepoints {
        let mut graphs = Vec::with_capacity(neighbors.len());
        for &j in neighbors {
            let g = train[j].graph(t).ok_or_else(|| SelectionError::MissingTimepoint {
                id: train[j].id().to_string(),
                timepoint: t,
            })?;
            graphs.push(g);
        }
        out.push(BrainGraph::mean_of(&graphs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(values: &[f64]) -> Embedding {
        Embedding::new(values.to_vec()).unwrap()
    }

    fn res(values: &[f64]) -> Residual {
        residual(&emb(values), &emb(&vec![0.0; values.len()])).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> BrainGraph {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rng.random();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        BrainGraph::new(m).unwrap()
    }

    fn trajectory(id: &str, rng: &mut ChaCha8Rng, n: usize, t: usize) -> SubjectTrajectory {
        let graphs = (0..t).map(|_| Some(random_graph(rng, n))).collect();
        SubjectTrajectory::new(id.to_string(), Split::Train, graphs).unwrap()
    }

    #[test]
    fn residual_is_the_absolute_difference() {
        let r = residual(&emb(&[1.0, 3.0]), &emb(&[2.0, 1.0])).unwrap();
        assert_eq!(r.values(), &[1.0, 2.0]);
        let swapped = residual(&emb(&[2.0, 1.0]), &emb(&[1.0, 3.0])).unwrap();
        assert_eq!(r, swapped);
        let zero = residual(&emb(&[1.0, 3.0]), &emb(&[1.0, 3.0])).unwrap();
        assert_eq!(zero.values(), &[0.0, 0.0]);
    }

    #[test]
    fn residual_rejects_length_mismatch() {
        assert!(matches!(
            residual(&emb(&[1.0]), &emb(&[1.0, 2.0])),
            Err(SelectionError::LengthMismatch { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn embedding_rejects_non_finite_entries() {
        assert!(matches!(
            Embedding::new(vec![1.0, f64::NAN]),
            Err(SelectionError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn similarity_matches_hand_dot_product() {
        let s = similarity_matrix(&[res(&[1.0, 2.0])], &[res(&[3.0, 4.0])], false).unwrap();
        assert_eq!(s.get(0, 0), 11.0);
        let orthogonal =
            similarity_matrix(&[res(&[1.0, 0.0])], &[res(&[0.0, 5.0])], false).unwrap();
        assert_eq!(orthogonal.get(0, 0), 0.0);
    }

    #[test]
    fn similarity_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let test: Vec<Residual> =
            (0..3).map(|_| res(&(0..6).map(|_| rng.random::<f64>()).collect::<Vec<_>>())).collect();
        let train: Vec<Residual> =
            (0..4).map(|_| res(&(0..6).map(|_| rng.random::<f64>()).collect::<Vec<_>>())).collect();
        let s = similarity_matrix(&test, &train, false).unwrap();
        assert_eq!(s.shape(), (3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.0;
                for d in 0..6 {
                    want += test[i].values()[d] * train[j].values()[d];
                }
                assert_eq!(s.get(i, j), want);
            }
        }
    }

    #[test]
    fn normalized_similarity_is_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = res(&(0..5).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let b = res(&(0..5).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let s = similarity_matrix(&[a.clone()], &[b.clone()], true).unwrap();
        let na = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut want = 0.0;
        for d in 0..5 {
            want += a.values()[d] * b.values()[d];
        }
        want /= na * nb;
        assert!((s.get(0, 0) - want).abs() < 1e-12);
        // A zero residual stays zero instead of dividing by its norm.
        let zero = res(&[0.0; 5]);
        let sz = similarity_matrix(&[zero], &[b], true).unwrap();
        assert_eq!(sz.get(0, 0), 0.0);
    }

    #[test]
    fn empty_residual_lists_are_rejected() {
        assert!(matches!(similarity_matrix(&[], &[res(&[1.0])], false), Err(SelectionError::Empty)));
        assert!(matches!(similarity_matrix(&[res(&[1.0])], &[], false), Err(SelectionError::Empty)));
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        let s = Matrix::from_vec(1, 4, vec![0.2, 0.9, 0.9, 0.1]);
        assert_eq!(top_k(&s, 0, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&s, 0, 4).unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn top_k_matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..10);
            let row: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).round() / 4.0).collect();
            let s = Matrix::from_vec(1, n, row.clone());
            let k = rng.random_range(1..=n);
            let got = top_k(&s, 0, k).unwrap();
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
            });
            oracle.truncate(k);
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn top_k_is_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s = Matrix::from_vec(1, n, row.clone());
            let transformed =
                Matrix::from_vec(1, n, row.iter().map(|v| 2.0 * v + 1.0).collect());
            let k = rng.random_range(1..=n);
            assert_eq!(top_k(&s, 0, k).unwrap(), top_k(&transformed, 0, k).unwrap());
        }
    }

    #[test]
    fn top_k_validates_its_arguments() {
        let s = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        assert!(matches!(top_k(&s, 0, 0), Err(SelectionError::KOutOfRange { k: 0, n: 3 })));
        assert!(matches!(top_k(&s, 0, 4), Err(SelectionError::KOutOfRange { k: 4, n: 3 })));
        assert!(matches!(top_k(&s, 1, 1), Err(SelectionError::RowOutOfRange { row: 1, rows: 1 })));
    }

    #[test]
    fn single_neighbor_prediction_is_that_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let subjects: Vec<SubjectTrajectory> =
            (0..3).map(|i| trajectory(&format!("s{i}"), &mut rng, 5, 3)).collect();
        let train: Vec<&SubjectTrajectory> = subjects.iter().collect();
        let pred = predict_trajectory(&train, &[1], &[1, 2]).unwrap();
        assert_eq!(&pred[0], subjects[1].graph(1).unwrap());
        assert_eq!(&pred[1], subjects[1].graph(2).unwrap());
    }

    #[test]
    fn all_neighbors_prediction_is_the_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let subjects: Vec<SubjectTrajectory> =
            (0..4).map(|i| trajectory(&format!("s{i}"), &mut rng, 4, 2)).collect();
        let train: Vec<&SubjectTrajectory> = subjects.iter().collect();
        let pred = predict_trajectory(&train, &[0, 1, 2, 3], &[1]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mean: f64 = subjects
                    .iter()
                    .map(|s| s.graph(1).unwrap().weights().get(i, j))
                    .sum::<f64>()
                    / 4.0;
                assert!((pred[0].weights().get(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_reports_missing_followups() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let complete = trajectory("full", &mut rng, 4, 3);
        let sparse = SubjectTrajectory::new(
            "sparse".to_string(),
            Split::Test,
            vec![Some(random_graph(&mut rng, 4)), None, None],
        )
        .unwrap();
        let train = vec![&complete, &sparse];
        let err = predict_trajectory(&train, &[0, 1], &[2]).unwrap_err();
        match err {
            SelectionError::MissingTimepoint { id, timepoint } => {
                assert_eq!(id, "sparse");
                assert_eq!(timepoint, 2);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn prediction_validates_neighbor_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let subjects: Vec<SubjectTrajectory> =
            (0..2).map(|i| trajectory(&format!("s{i}"), &mut rng, 4, 2)).collect();
        let train: Vec<&SubjectTrajectory> = subjects.iter().collect();
        assert!(matches!(predict_trajectory(&train, &[], &[1]), Err(SelectionError::NoNeighbors)));
        assert!(matches!(
            predict_trajectory(&train, &[2], &[1]),
            Err(SelectionError::BadNeighbor { index: 2, n: 2 })
        ));
    }
}
