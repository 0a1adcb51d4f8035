//! Plain-text persistence: matrix files and dataset manifests.
//!
//! Matrix files are headerless CSV, one matrix row per line, each value
//! printed as the shortest decimal that parses back to the identical `f64`
//! (never more than 17 significant digits). A dataset directory holds one
//! matrix file per subject-timepoint plus a `manifest.txt` of `key = value`
//! lines. All writers are deterministic: identical data yields identical
//! bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::graph::{BrainGraph, GraphError, LongitudinalDataset, Split, SubjectTrajectory};
use crate::matrix::Matrix;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Shortest decimal representation that round-trips to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse { path: path.display().to_string(), line, message: message.into() }
}

// ── Matrix files ─────────────────────────────────────────────────────────────

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_file(path: &Path, m: &Matrix) -> Result<(), GraphError> {
    fs::write(path, matrix_to_csv(m)).map_err(|e| io_err(path, e))
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, lineno + 1, format!("invalid number {tok:?}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "matrix file is empty"));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Matrix::from_vec(r, c, rows.into_iter().flatten().collect()))
}

// ── Key-value lines ──────────────────────────────────────────────────────────

/// Splits a `key = value` line on the first `=`. Returns `None` for blank
/// lines and `#` comments.
pub(crate) fn key_value(line: &str) -> Option<(&str, &str)> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

// ── Dataset directories ──────────────────────────────────────────────────────

fn timepoint_label(t: usize) -> String {
    format!("t{t}")
}

fn matrix_file_name(id: &str, t: usize) -> String {
    format!("{id}_{}.csv", timepoint_label(t))
}

/// Writes `manifest.txt` plus one matrix file per stored subject-timepoint.
/// `extra_comments` lines are embedded as `#` comments (e.g. a generator
/// config echo); they do not affect loading.
pub fn save_dataset_with_comments(
    dir: &Path,
    dataset: &LongitudinalDataset,
    extra_comments: &[String],
) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::from("# connectivity dataset manifest\n");
    for c in extra_comments {
        let _ = writeln!(manifest, "# {c}");
    }
    let _ = writeln!(manifest, "n_r = {}", dataset.n_r());
    let labels: Vec<String> = (0..dataset.n_timepoints()).map(timepoint_label).collect();
    let _ = writeln!(manifest, "timepoints = {}", labels.join(" "));
    for s in dataset.subjects() {
        let mut line = format!("subject = {} {}", s.id(), s.split().tag());
        for t in 0..s.timepoint_count() {
            if let Some(g) = s.graph(t) {
                let name = matrix_file_name(s.id(), t);
                write_matrix_file(&dir.join(&name), g.weights())?;
                let _ = write!(line, " {}={}", labels[t], name);
            }
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

pub fn save_dataset(dir: &Path, dataset: &LongitudinalDataset) -> Result<(), GraphError> {
    save_dataset_with_comments(dir, dataset, &[])
}

/// Loads a dataset directory written by [`save_dataset`] (or by hand in the
/// same format). Validates every graph on the way in.
pub fn load_dataset(dir: &Path) -> Result<LongitudinalDataset, GraphError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;

    let mut n_r: Option<usize> = None;
    let mut labels: Option<Vec<String>> = None;
    let mut subjects: Vec<SubjectTrajectory> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let Some((key, value)) = key_value(raw) else { continue };
        let lineno = lineno + 1;
        match key {
            "n_r" => {
                let v = value
                    .parse::<usize>()
                    .map_err(|_| parse_err(&manifest_path, lineno, format!("invalid n_r {value:?}")))?;
                n_r = Some(v);
            }
            "timepoints" => {
                let l: Vec<String> = value.split_whitespace().map(str::to_string).collect();
                if l.is_empty() {
                    return Err(parse_err(&manifest_path, lineno, "timepoints list is empty"));
                }
                labels = Some(l);
            }
            "subject" => {
                let labels = labels
                    .as_ref()
                    .ok_or_else(|| parse_err(&manifest_path, lineno, "subject listed before timepoints"))?;
                let expected_n_r = n_r
                    .ok_or_else(|| parse_err(&manifest_path, lineno, "subject listed before n_r"))?;
                let mut tokens = value.split_whitespace();
                let id = tokens
                    .next()
                    .ok_or_else(|| parse_err(&manifest_path, lineno, "missing subject id"))?
                    .to_string();
                let split = match tokens.next() {
                    Some("train") => Split::Train,
                    Some("test") => Split::Test,
                    other => {
                        return Err(parse_err(
                            &manifest_path,
                            lineno,
                            format!("split tag must be train or test, got {other:?}"),
                        ))
                    }
                };
                let mut graphs: Vec<Option<BrainGraph>> = vec![None; labels.len()];
                for tok in tokens {
                    let Some((label, file)) = tok.split_once('=') else {
                        return Err(parse_err(
                            &manifest_path,
                            lineno,
                            format!("expected <timepoint>=<file>, got {tok:?}"),
                        ));
                    };
                    let Some(t) = labels.iter().position(|l| l == label) else {
                        return Err(parse_err(
                            &manifest_path,
                            lineno,
                            format!("unknown timepoint label {label:?}"),
                        ));
                    };
                    let path = dir.join(file);
                    let matrix = match read_matrix_file(&path) {
                        Err(GraphError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                            return Err(GraphError::MissingTimepoint { id: id.clone(), timepoint: t })
                        }
                        other => other?,
                    };
                    if matrix.rows() != expected_n_r || matrix.cols() != expected_n_r {
                        return Err(GraphError::InconsistentSize {
                            id: id.clone(),
                            timepoint: t,
                            got: matrix.rows(),
                            expected: expected_n_r,
                        });
                    }
                    graphs[t] = Some(BrainGraph::new(matrix)?);
                }
                subjects.push(SubjectTrajectory::new(id, split, graphs)?);
            }
            other => {
                return Err(parse_err(&manifest_path, lineno, format!("unknown manifest key {other:?}")));
            }
        }
    }
    LongitudinalDataset::new(subjects)
}

/// Convenience handle for callers that need the manifest location of a
/// dataset directory (e.g. error messages).
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}
