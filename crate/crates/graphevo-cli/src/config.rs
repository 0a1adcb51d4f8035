//! Pipeline configuration: flat `key = value` file, `#` comments, strict
//! unknown-key rejection, flag overrides, and a bit-stable echo.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphevo::evaluation::EvalConfig;
use graphevo::gan::TrainConfig;
use graphevo::io;
use graphevo::synth::SynthConfig;

/// Which partition `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// k-fold cross-validation over the training subjects.
    Cv,
    /// Single run on the train/test tags stored in the dataset.
    Split,
}

/// Merged settings for every subcommand; one seed feeds generation,
/// training, and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub cbt_dir: PathBuf,
    pub model_file: PathBuf,
    pub out_dir: PathBuf,

    pub n_subjects: usize,
    pub n_r: usize,
    pub n_timepoints: usize,
    pub n_clusters: usize,
    pub sigma: f64,
    pub delta: f64,
    pub train_fraction: f64,
    pub n_independent: usize,

    pub lambda: f64,
    pub lr_normalizer: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub dropout_keep: f64,
    pub hidden_normalizer: usize,
    pub hidden_discriminator: usize,

    pub k_min: usize,
    pub k_max: usize,
    /// Neighbor count used by `predict`.
    pub k_predict: usize,
    pub folds: usize,
    pub normalize_residuals: bool,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        Self {
            dataset_dir: PathBuf::from("data"),
            cbt_dir: PathBuf::from("artifacts/cbt"),
            model_file: PathBuf::from("artifacts/model.txt"),
            out_dir: PathBuf::from("artifacts"),
            n_subjects: synth.n_subjects,
            n_r: synth.n_r,
            n_timepoints: synth.n_timepoints,
            n_clusters: synth.n_clusters,
            sigma: synth.sigma,
            delta: synth.delta,
            train_fraction: synth.train_fraction,
            n_independent: synth.n_independent,
            lambda: train.lambda,
            lr_normalizer: train.lr_normalizer,
            lr_discriminator: train.lr_discriminator,
            beta1: train.beta1,
            beta2: train.beta2,
            epochs: train.epochs,
            dropout_keep: train.dropout_keep,
            hidden_normalizer: train.hidden_normalizer,
            hidden_discriminator: train.hidden_discriminator,
            k_min: 2,
            k_max: 10,
            k_predict: 5,
            folds: 3,
            normalize_residuals: false,
            eval_mode: EvalMode::Cv,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Parses a config file over the defaults; every key may appear at most
    /// once and unknown keys are rejected with their line number.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut config = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .with_context(|| {
                    format!("{}:{}: expected `key = value`", path.display(), index + 1)
                })?;
            if seen.iter().any(|s| s == key) {
                bail!("{}:{}: duplicate key `{key}`", path.display(), index + 1);
            }
            seen.push(key.to_string());
            config.apply(key, value).with_context(|| {
                format!("{}:{}: invalid value for `{key}`", path.display(), index + 1)
            })?;
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            value.parse::<T>().with_context(|| format!("cannot parse `{value}`"))
        }
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "cbt_dir" => self.cbt_dir = PathBuf::from(value),
            "model_file" => self.model_file = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_subjects" => self.n_subjects = parse(value)?,
            "n_r" => self.n_r = parse(value)?,
            "n_timepoints" => self.n_timepoints = parse(value)?,
            "n_clusters" => self.n_clusters = parse(value)?,
            "sigma" => self.sigma = parse(value)?,
            "delta" => self.delta = parse(value)?,
            "train_fraction" => self.train_fraction = parse(value)?,
            "n_independent" => self.n_independent = parse(value)?,
            "lambda" => self.lambda = parse(value)?,
            "lr_normalizer" => self.lr_normalizer = parse(value)?,
            "lr_discriminator" => self.lr_discriminator = parse(value)?,
            "beta1" => self.beta1 = parse(value)?,
            "beta2" => self.beta2 = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "dropout_keep" => self.dropout_keep = parse(value)?,
            "hidden_normalizer" => self.hidden_normalizer = parse(value)?,
            "hidden_discriminator" => self.hidden_discriminator = parse(value)?,
            "k_min" => self.k_min = parse(value)?,
            "k_max" => self.k_max = parse(value)?,
            "k_predict" => self.k_predict = parse(value)?,
            "folds" => self.folds = parse(value)?,
            "normalize_residuals" => {
                self.normalize_residuals = match value {
                    "true" => true,
                    "false" => false,
                    other => bail!("expected true or false, got `{other}`"),
                }
            }
            "eval_mode" => {
                self.eval_mode = match value {
                    "cv" => EvalMode::Cv,
                    "split" => EvalMode::Split,
                    other => bail!("expected cv or split, got `{other}`"),
                }
            }
            "seed" => self.seed = parse(value)?,
            other => bail!("unknown key `{other}`"),
        }
        Ok(())
    }

    /// Inclusive evaluation k-range.
    pub fn k_values(&self) -> Result<Vec<usize>> {
        if self.k_min < 1 || self.k_min > self.k_max {
            bail!("empty k-range {}..{}", self.k_min, self.k_max);
        }
        Ok((self.k_min..=self.k_max).collect())
    }

    /// Parses a `--k A..B` override (inclusive on both ends).
    pub fn apply_k_range(&mut self, range: &str) -> Result<()> {
        let (lo, hi) = range
            .split_once("..")
            .with_context(|| format!("--k expects `A..B`, got `{range}`"))?;
        self.k_min = lo.trim().parse().with_context(|| format!("bad k lower bound `{lo}`"))?;
        self.k_max = hi.trim().parse().with_context(|| format!("bad k upper bound `{hi}`"))?;
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_subjects: self.n_subjects,
            n_r: self.n_r,
            n_timepoints: self.n_timepoints,
            n_clusters: self.n_clusters,
            sigma: self.sigma,
            delta: self.delta,
            train_fraction: self.train_fraction,
            n_independent: self.n_independent,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr_normalizer: self.lr_normalizer,
            lr_discriminator: self.lr_discriminator,
            beta1: self.beta1,
            beta2: self.beta2,
            epochs: self.epochs,
            dropout_keep: self.dropout_keep,
            hidden_normalizer: self.hidden_normalizer,
            hidden_discriminator: self.hidden_discriminator,
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            folds: self.folds,
            k_values: self.k_values()?,
            train: self.train(),
            normalize_residuals: self.normalize_residuals,
            seed: self.seed,
        })
    }

    /// Effective config as `key = value` lines in declaration order; floats
    /// use the shortest round-trip form so the echo is bit-stable.
    pub fn echo(&self) -> String {
        let f = io::format_value;
        let mut s = String::new();
        let _ = writeln!(s, "dataset_dir = {}", self.dataset_dir.display());
        let _ = writeln!(s, "cbt_dir = {}", self.cbt_dir.display());
        let _ = writeln!(s, "model_file = {}", self.model_file.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "n_subjects = {}", self.n_subjects);
        let _ = writeln!(s, "n_r = {}", self.n_r);
        let _ = writeln!(s, "n_timepoints = {}", self.n_timepoints);
        let _ = writeln!(s, "n_clusters = {}", self.n_clusters);
        let _ = writeln!(s, "sigma = {}", f(self.sigma));
        let _ = writeln!(s, "delta = {}", f(self.delta));
        let _ = writeln!(s, "train_fraction = {}", f(self.train_fraction));
        let _ = writeln!(s, "n_independent = {}", self.n_independent);
        let _ = writeln!(s, "lambda = {}", f(self.lambda));
        let _ = writeln!(s, "lr_normalizer = {}", f(self.lr_normalizer));
        let _ = writeln!(s, "lr_discriminator = {}", f(self.lr_discriminator));
        let _ = writeln!(s, "beta1 = {}", f(self.beta1));
        let _ = writeln!(s, "beta2 = {}", f(self.beta2));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "dropout_keep = {}", f(self.dropout_keep));
        let _ = writeln!(s, "hidden_normalizer = {}", self.hidden_normalizer);
        let _ = writeln!(s, "hidden_discriminator = {}", self.hidden_discriminator);
        let _ = writeln!(s, "k_min = {}", self.k_min);
        let _ = writeln!(s, "k_max = {}", self.k_max);
        let _ = writeln!(s, "k_predict = {}", self.k_predict);
        let _ = writeln!(s, "folds = {}", self.folds);
        let _ = writeln!(s, "normalize_residuals = {}", self.normalize_residuals);
        let _ = writeln!(
            s,
            "eval_mode = {}",
            match self.eval_mode {
                EvalMode::Cv => "cv",
                EvalMode::Split => "split",
            }
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}
