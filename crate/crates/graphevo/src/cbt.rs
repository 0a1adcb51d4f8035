//! Connectional template construction.
//!
//! Given an independent population of baseline graphs, each connection of the
//! template takes the value of the population subject whose weight at that
//! connection is, in total absolute difference, closest to everyone else's.
//! Per connection `(i, j)`:
//!
//! * pairwise distances  `H(s, s') = |V_ij^s − V_ij^{s'}|`
//! * cumulative distance `M(s) = Σ_{s'} H(s, s')`
//! * template value      `V_ij^k` with `k = argmin_s M(s)`, ties going to the
//!   lowest subject index.
//!
//! Only the strict upper triangle is computed; the result is mirrored and the
//! diagonal stays zero, so the template is itself a valid connectivity graph.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::graph::{BrainGraph, GraphError};
use crate::io;
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum CbtError {
    #[error("template construction requires at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("subject {index} has {got} regions, expected {expected}")]
    MixedSizes { index: usize, got: usize, expected: usize },
    #[error("{0} source ids for {1} subjects")]
    IdCountMismatch(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// All per-connection pairwise distance matrices of a population:
/// `block(i, j)[s][s'] = |V_ij^s − V_ij^{s'}|` for `i < j`.
pub struct HighOrderDistance {
    n_r: usize,
    n_c: usize,
    blocks: Vec<Matrix>,
}

fn pair_index(n_r: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n_r);
    // Row-major rank of (i, j) within the strict upper triangle.
    i * n_r - i * (i + 1) / 2 + (j - i - 1)
}

impl HighOrderDistance {
    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    /// Distance matrix of connection `(i, j)`; requires `i < j`.
    pub fn block(&self, i: usize, j: usize) -> &Matrix {
        assert!(i < j && j < self.n_r, "block requires i < j < n_r, got ({i},{j}) with n_r={}", self.n_r);
        &self.blocks[pair_index(self.n_r, i, j)]
    }
}

/// Computes every connection's subject-by-subject distance matrix.
pub fn pairwise_distances(population: &[BrainGraph]) -> Result<HighOrderDistance, CbtError> {
    let n_c = population.len();
    if n_c < 2 {
        return Err(CbtError::TooFewSubjects(n_c));
    }
    let n_r = population[0].n_r();
    for (index, g) in population.iter().enumerate() {
        if g.n_r() != n_r {
            return Err(CbtError::MixedSizes { index, got: g.n_r(), expected: n_r });
        }
    }
    let mut blocks = Vec::with_capacity(n_r * (n_r - 1) / 2);
    for i in 0..n_r {
        for j in (i + 1)..n_r {
            let mut h = Matrix::zeros(n_c, n_c);
            for s in 0..n_c {
                let vs = population[s].weights().get(i, j);
                for s2 in (s + 1)..n_c {
                    let d = (vs - population[s2].weights().get(i, j)).abs();
                    h.set(s, s2, d);
                    h.set(s2, s, d);
                }
            }
            blocks.push(h);
        }
    }
    Ok(HighOrderDistance { n_r, n_c, blocks })
}

/// Cumulative distance of each subject at connection `(i, j)`:
/// `M(s) = Σ_{s'} H(s, s')`.
pub fn cumulative_strength(distances: &HighOrderDistance, i: usize, j: usize) -> Vec<f64> {
    let h = distances.block(i, j);
    (0..distances.n_c).map(|s| h.row(s).iter().sum()).collect()
}

/// The connectional template plus its provenance: which source subject was
/// selected at every connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Cbt {
    template: BrainGraph,
    source_ids: Vec<String>,
    // Selected subject index per cell, row-major n_r x n_r; mirrored like the
    // weights themselves. Diagonal cells carry no selection and store 0.
    argmin: Vec<usize>,
}

impl Cbt {
    pub fn template(&self) -> &BrainGraph {
        &self.template
    }

    pub fn n_r(&self) -> usize {
        self.template.n_r()
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    /// Index (into [`Cbt::source_ids`]) of the subject whose value was taken
    /// at connection `(i, j)`; requires `i != j`.
    pub fn selected_subject(&self, i: usize, j: usize) -> usize {
        assert!(i != j, "diagonal cells have no source subject");
        self.argmin[i * self.n_r() + j]
    }
}

/// Builds the template from an independent population. `source_ids` must
/// parallel `population`; they are carried for provenance only.
pub fn build_cbt(population: &[BrainGraph], source_ids: &[String]) -> Result<Cbt, CbtError> {
    if source_ids.len() != population.len() {
        return Err(CbtError::IdCountMismatch(source_ids.len(), population.len()));
    }
    let distances = pairwise_distances(population)?;
    let n_r = distances.n_r();
    let mut weights = Matrix::zeros(n_r, n_r);
    let mut argmin = vec![0usize; n_r * n_r];
    for i in 0..n_r {
        for j in (i + 1)..n_r {
            let m = cumulative_strength(&distances, i, j);
            let mut best = 0usize;
            for (s, &v) in m.iter().enumerate().skip(1) {
                // Strict comparison keeps ties on the lowest subject index.
                if v < m[best] {
                    best = s;
                }
            }
            let value = population[best].weights().get(i, j);
            weights.set(i, j, value);
            weights.set(j, i, value);
            argmin[i * n_r + j] = best;
            argmin[j * n_r + i] = best;
        }
    }
    let template = BrainGraph::new(weights)?;
    Ok(Cbt { template, source_ids: source_ids.to_vec(), argmin })
}

// ── Persistence ──────────────────────────────────────────────────────────────

pub const TEMPLATE_FILE: &str = "cbt.csv";
pub const PROVENANCE_FILE: &str = "cbt_provenance.txt";
pub const ARGMIN_FILE: &str = "cbt_argmin.csv";

impl Cbt {
    /// Writes the template matrix, the argmin map, and a provenance manifest
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CbtError> {
        fs::create_dir_all(dir).map_err(|e| GraphError::Io { path: dir.display().to_string(), source: e })?;
        io::write_matrix_file(&dir.join(TEMPLATE_FILE), self.template.weights())?;
        let n_r = self.n_r();
        let as_f64 = Matrix::from_fn(n_r, n_r, |i, j| self.argmin[i * n_r + j] as f64);
        io::write_matrix_file(&dir.join(ARGMIN_FILE), &as_f64)?;
        let mut prov = String::from("# template provenance\n");
        let _ = writeln!(prov, "source_ids = {}", self.source_ids.join(" "));
        let _ = writeln!(prov, "argmin_map = {ARGMIN_FILE}");
        let path = dir.join(PROVENANCE_FILE);
        fs::write(&path, prov).map_err(|e| GraphError::Io { path: path.display().to_string(), source: e })?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CbtError> {
        let template = BrainGraph::new(io::read_matrix_file(&dir.join(TEMPLATE_FILE))?)?;
        let prov_path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&prov_path)
            .map_err(|e| GraphError::Io { path: prov_path.display().to_string(), source: e })?;
        let mut source_ids = Vec::new();
        let mut argmin_file = ARGMIN_FILE.to_string();
        for line in text.lines() {
            if let Some((k, v)) = crate::io::key_value(line) {
                match k {
                    "source_ids" => source_ids = v.split_whitespace().map(str::to_string).collect(),
                    "argmin_map" => argmin_file = v.to_string(),
                    _ => {}
                }
            }
        }
        let raw = io::read_matrix_file(&dir.join(argmin_file))?;
        let argmin = raw.data().iter().map(|&v| v as usize).collect();
        Ok(Cbt { template, source_ids, argmin })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_with_edge(n: usize, i: usize, j: usize, v: f64, background: f64) -> BrainGraph {
        let mut m = Matrix::from_fn(n, n, |a, b| if a == b { 0.0 } else { background });
        m.set(i, j, v);
        m.set(j, i, v);
        BrainGraph::new(m).unwrap()
    }

    fn random_population(rng: &mut ChaCha8Rng, n_c: usize, n_r: usize) -> Vec<BrainGraph> {
        (0..n_c)
            .map(|_| {
                let mut m = Matrix::zeros(n_r, n_r);
                for i in 0..n_r {
                    for j in (i + 1)..n_r {
                        let v: f64 = rng.random();
                        m.set(i, j, v);
                        m.set(j, i, v);
                    }
                }
                BrainGraph::new(m).unwrap()
            })
            .collect()
    }

    /// Straight-from-the-definition reference: recomputes every cumulative
    /// distance inline, independent of the block structure used by the
    /// implementation.
    fn brute_force_template(population: &[BrainGraph]) -> Matrix {
        let n_r = population[0].n_r();
        let mut out = Matrix::zeros(n_r, n_r);
        for i in 0..n_r {
            for j in (i + 1)..n_r {
                let mut best_s = 0usize;
                let mut best_m = f64::INFINITY;
                for (s, g) in population.iter().enumerate() {
                    let v = g.weights().get(i, j);
                    let m: f64 = population.iter().map(|g2| (v - g2.weights().get(i, j)).abs()).sum();
                    if m < best_m {
                        best_m = m;
                        best_s = s;
                    }
                }
                let v = population[best_s].weights().get(i, j);
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn pairwise_distance_matches_hand_value() {
        // Weights 0.1 and 0.4 at one connection → distance 0.3.
        let a = graph_with_edge(3, 0, 1, 0.1, 0.25);
        let b = graph_with_edge(3, 0, 1, 0.4, 0.25);
        let h = pairwise_distances(&[a, b]).unwrap();
        let block = h.block(0, 1);
        assert!((block.get(0, 1) - 0.3).abs() < 1e-15);
        assert_eq!(block.get(0, 1), block.get(1, 0));
        assert_eq!(block.get(0, 0), 0.0);
    }

    #[test]
    fn cumulative_strength_matches_hand_example() {
        // Values (0.1, 0.2, 0.4) at one connection → M = (0.4, 0.3, 0.5).
        let pop: Vec<BrainGraph> =
            [0.1, 0.2, 0.4].iter().map(|&v| graph_with_edge(2, 0, 1, v, 0.0)).collect();
        let h = pairwise_distances(&pop).unwrap();
        let m = cumulative_strength(&h, 0, 1);
        for (got, want) in m.iter().zip([0.4, 0.3, 0.5]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Subject 2 (index 1) should therefore be selected.
        let cbt = build_cbt(&pop, &ids(3)).unwrap();
        assert_eq!(cbt.selected_subject(0, 1), 1);
        assert_eq!(cbt.template().weights().get(0, 1), 0.2);
    }

    #[test]
    fn identical_population_reproduces_the_common_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_population(&mut rng, 1, 6).pop();
        // A single graph is below the population minimum; duplicate it.
        let g = g.unwrap();
        let pop = vec![g.clone(), g.clone(), g.clone()];
        let cbt = build_cbt(&pop, &ids(3)).unwrap();
        assert_eq!(cbt.template(), &g);
        // All-tied cumulative distances resolve to the first subject.
        assert_eq!(cbt.selected_subject(2, 4), 0);
    }

    #[test]
    fn two_subjects_always_tie_to_the_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pop = random_population(&mut rng, 2, 5);
        let cbt = build_cbt(&pop, &ids(2)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(cbt.selected_subject(i, j), 0);
                }
            }
        }
        assert_eq!(cbt.template(), &pop[0]);
    }

    #[test]
    fn template_is_invariant_to_subject_order_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pop = random_population(&mut rng, 7, 5);
        let cbt = build_cbt(&pop, &ids(7)).unwrap();
        let mut reordered = pop.clone();
        reordered.rotate_left(3);
        let cbt2 = build_cbt(&reordered, &ids(7)).unwrap();
        assert_eq!(cbt.template(), cbt2.template());
    }

    #[test]
    fn every_template_cell_comes_from_some_subject() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pop = random_population(&mut rng, 6, 6);
        let cbt = build_cbt(&pop, &ids(6)).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                let v = cbt.template().weights().get(i, j);
                assert!(pop.iter().any(|g| g.weights().get(i, j) == v));
                // And the recorded provenance points at a matching subject.
                let sel = cbt.selected_subject(i, j);
                assert_eq!(pop[sel].weights().get(i, j), v);
            }
        }
    }

    #[test]
    fn matches_brute_force_reference_on_random_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &(n_c, n_r) in &[(2, 4), (3, 6), (5, 4), (8, 6)] {
            let pop = random_population(&mut rng, n_c, n_r);
            let cbt = build_cbt(&pop, &ids(n_c)).unwrap();
            assert_eq!(cbt.template().weights(), &brute_force_template(&pop));
        }
    }

    #[test]
    fn population_of_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pop = random_population(&mut rng, 1, 4);
        assert!(matches!(build_cbt(&pop, &ids(1)), Err(CbtError::TooFewSubjects(1))));
    }

    #[test]
    fn mixed_region_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut pop = random_population(&mut rng, 2, 4);
        pop.extend(random_population(&mut rng, 1, 5));
        assert!(matches!(
            pairwise_distances(&pop),
            Err(CbtError::MixedSizes { index: 2, got: 5, expected: 4 })
        ));
    }

    #[test]
    fn full_scale_population_builds_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pop = random_population(&mut rng, 23, 35);
        let start = std::time::Instant::now();
        let cbt = build_cbt(&pop, &ids(23)).unwrap();
        assert!(start.elapsed().as_secs_f64() < 5.0);
        assert_eq!(cbt.n_r(), 35);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pop = random_population(&mut rng, 4, 5);
        let cbt = build_cbt(&pop, &ids(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cbt.save(dir.path()).unwrap();
        let back = Cbt::load(dir.path()).unwrap();
        assert_eq!(cbt, back);
    }
}
