//! Pipeline driver: synthetic cohort generation, template building,
//! adversarial training, embedding, forecasting, and accuracy reports,
//! with deterministic artifacts under a fixed config and seed.

mod config;

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use graphevo::cbt::{self, Cbt};
use graphevo::evaluation;
use graphevo::gan::{self, GanModel};
use graphevo::graph::{BrainGraph, LongitudinalDataset, Split, SubjectTrajectory};
use graphevo::io;
use graphevo::selection;
use graphevo::synth;

use config::{EvalMode, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "graphevo",
    about = "Forecasts brain graph evolution from a baseline connectome",
    version
)]
struct Cli {
    /// Pipeline configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Overrides the pipeline seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the evaluation k-range, inclusive, e.g. `2..10`.
    #[arg(long, global = true)]
    k: Option<String>,
    /// Overrides the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Overrides the reconstruction weight in the normalizer loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generates a synthetic longitudinal cohort plus an independent
    /// template-building population.
    GenData,
    /// Builds the connectional template from the independent population.
    BuildCbt,
    /// Trains the adversarial normalizer on the training subjects.
    Train,
    /// Writes embeddings for every subject and for the template.
    Embed,
    /// Forecasts follow-up graphs for the test subjects.
    Predict,
    /// Sweeps k and writes the accuracy report for all four strategies.
    Evaluate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildCbt => "build-cbt",
            Command::Train => "train",
            Command::Embed => "embed",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(k) = &cli.k {
        config.apply_k_range(k)?;
    }
    if let Some(epochs) = cli.epochs {
        config.epochs = epochs;
    }
    if let Some(lambda) = cli.lambda {
        config.lambda = lambda;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }

    println!("# graphevo run log");
    println!("# command = {}", cli.command.name());
    print!("{}", config.echo());

    match cli.command {
        Command::GenData => gen_data(&config)?,
        Command::BuildCbt => build_cbt(&config)?,
        Command::Train => train(&config)?,
        Command::Embed => embed(&config)?,
        Command::Predict => predict(&config)?,
        Command::Evaluate => evaluate(&config)?,
    }

    println!("# elapsed_ms = {}", started.elapsed().as_millis());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<LongitudinalDataset> {
    io::load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_template(dir: &Path) -> Result<Cbt> {
    Cbt::load(dir).with_context(|| format!("loading template from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<GanModel> {
    GanModel::load(path).with_context(|| format!("loading model from {}", path.display()))
}

fn partition(
    dataset: &LongitudinalDataset,
) -> (Vec<&SubjectTrajectory>, Vec<&SubjectTrajectory>) {
    let train = dataset.train_indices().into_iter().map(|i| dataset.subject(i)).collect();
    let test = dataset.test_indices().into_iter().map(|i| dataset.subject(i)).collect();
    (train, test)
}

fn gen_data(config: &PipelineConfig) -> Result<()> {
    let synth_config = config.synth();
    let out = synth::generate(&synth_config)?;
    let (tagged, warnings) =
        synth::split(&out.dataset, &out.cluster_assignments, config.train_fraction, config.seed)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    let f = io::format_value;
    let comments = vec![
        format!("generator seed = {}", synth_config.seed),
        format!("generator n_subjects = {}", synth_config.n_subjects),
        format!("generator n_r = {}", synth_config.n_r),
        format!("generator n_timepoints = {}", synth_config.n_timepoints),
        format!("generator n_clusters = {}", synth_config.n_clusters),
        format!("generator sigma = {}", f(synth_config.sigma)),
        format!("generator delta = {}", f(synth_config.delta)),
        format!("generator train_fraction = {}", f(synth_config.train_fraction)),
        format!("generator n_independent = {}", synth_config.n_independent),
        format!("generator clamped_cells = {}", out.clamp_count),
    ];
    io::save_dataset_with_comments(&config.dataset_dir, &tagged, &comments)
        .with_context(|| format!("writing dataset to {}", config.dataset_dir.display()))?;

    let population: Vec<SubjectTrajectory> = out
        .independent
        .iter()
        .map(|(id, g)| SubjectTrajectory::new(id.clone(), Split::Train, vec![Some(g.clone())]))
        .collect::<Result<_, _>>()?;
    let population = LongitudinalDataset::new(population)?;
    let independent_dir = config.dataset_dir.join("independent");
    io::save_dataset_with_comments(
        &independent_dir,
        &population,
        &["independent template-building population".to_string()],
    )
    .with_context(|| format!("writing population to {}", independent_dir.display()))?;

    println!(
        "# wrote {} subjects ({} train, {} test) and {} independent subjects",
        tagged.subjects().len(),
        tagged.train_indices().len(),
        tagged.test_indices().len(),
        out.independent.len()
    );
    Ok(())
}

fn build_cbt(config: &PipelineConfig) -> Result<()> {
    let pop_dir = config.dataset_dir.join("independent");
    let population = load_dataset(&pop_dir)?;
    let graphs: Vec<BrainGraph> =
        population.subjects().iter().map(|s| s.baseline().clone()).collect();
    let ids: Vec<String> = population.subjects().iter().map(|s| s.id().to_string()).collect();
    let built = cbt::build_cbt(&graphs, &ids)?;
    built
        .save(&config.cbt_dir)
        .with_context(|| format!("writing template to {}", config.cbt_dir.display()))?;
    println!(
        "# built template from {} subjects, wrote {}",
        graphs.len(),
        config.cbt_dir.display()
    );
    Ok(())
}

fn train(config: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(&config.dataset_dir)?;
    let template = load_template(&config.cbt_dir)?;
    let (train_subjects, _) = partition(&dataset);
    let baselines: Vec<&BrainGraph> = train_subjects.iter().map(|s| s.baseline()).collect();
    let (model, trace) = gan::train(&baselines, &template, &config.train())?;

    if let Some(parent) = config.model_file.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    model
        .save(&config.model_file)
        .with_context(|| format!("writing model to {}", config.model_file.display()))?;

    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    let f = io::format_value;
    let mut csv = String::from("epoch,discriminator_loss,normalizer_loss,l1_loss\n");
    for epoch in &trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            epoch.epoch,
            f(epoch.discriminator),
            f(epoch.normalizer),
            f(epoch.l1)
        ));
    }
    let trace_path = config.out_dir.join("loss_trace.csv");
    fs::write(&trace_path, csv)
        .with_context(|| format!("writing loss trace to {}", trace_path.display()))?;

    let last = trace.last().expect("at least one epoch");
    println!(
        "# trained {} epochs on {} subjects; final l1 = {}",
        trace.len(),
        baselines.len(),
        f(last.l1)
    );
    println!("# model written to {}", config.model_file.display());
    Ok(())
}

fn embed(config: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(&config.dataset_dir)?;
    let template = load_template(&config.cbt_dir)?;
    let model = load_model(&config.model_file)?;
    let f = io::format_value;

    let n = dataset.n_r();
    let mut csv = String::from("id,split");
    for i in 0..n {
        csv.push_str(&format!(",e{i}"));
    }
    csv.push('\n');
    let mut push_row = |id: &str, tag: &str, z: &[f64]| {
        csv.push_str(id);
        csv.push(',');
        csv.push_str(tag);
        for v in z {
            csv.push(',');
            csv.push_str(&f(*v));
        }
        csv.push('\n');
    };
    push_row("cbt", "template", &model.normalizer.embed(template.template())?);
    for subject in dataset.subjects() {
        let z = model.normalizer.embed(subject.baseline())?;
        push_row(subject.id(), subject.split().tag(), &z);
    }

    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    let path = config.out_dir.join("embeddings.csv");
    fs::write(&path, csv).with_context(|| format!("writing embeddings to {}", path.display()))?;
    println!("# wrote {} embeddings to {}", dataset.subjects().len() + 1, path.display());
    Ok(())
}

fn predict(config: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(&config.dataset_dir)?;
    let template = load_template(&config.cbt_dir)?;
    let model = load_model(&config.model_file)?;
    let (train_subjects, test_subjects) = partition(&dataset);
    let train_t0: Vec<&BrainGraph> = train_subjects.iter().map(|s| s.baseline()).collect();
    let test_t0: Vec<&BrainGraph> = test_subjects.iter().map(|s| s.baseline()).collect();

    let similarity = evaluation::select_embedded_residual(
        &test_t0,
        &train_t0,
        &model.normalizer,
        &template,
        config.normalize_residuals,
    )?;
    let timepoints: Vec<usize> = (1..dataset.n_timepoints()).collect();
    let pred_dir = config.out_dir.join("predictions");
    fs::create_dir_all(&pred_dir)
        .with_context(|| format!("creating {}", pred_dir.display()))?;

    let f = io::format_value;
    let mut report = String::from("test_id,rank,neighbor_id,score\n");
    for (i, subject) in test_subjects.iter().enumerate() {
        let neighbors = selection::top_k(&similarity, i, config.k_predict)?;
        for (rank, &j) in neighbors.iter().enumerate() {
            report.push_str(&format!(
                "{},{},{},{}\n",
                subject.id(),
                rank,
                train_subjects[j].id(),
                f(similarity.get(i, j))
            ));
        }
        let forecasts = selection::predict_trajectory(&train_subjects, &neighbors, &timepoints)?;
        for (slot, &t) in timepoints.iter().enumerate() {
            let path = pred_dir.join(format!("pred_{}_t{}.csv", subject.id(), t));
            io::write_matrix_file(&path, forecasts[slot].weights())
                .with_context(|| format!("writing forecast to {}", path.display()))?;
        }
    }
    let report_path = pred_dir.join("selection.csv");
    fs::write(&report_path, report)
        .with_context(|| format!("writing selection report to {}", report_path.display()))?;
    println!(
        "# forecast {} test subjects at {} timepoints with k = {}",
        test_subjects.len(),
        timepoints.len(),
        config.k_predict
    );
    Ok(())
}

fn evaluate(config: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(&config.dataset_dir)?;
    let template = load_template(&config.cbt_dir)?;
    let eval_config = config.eval()?;
    let report = match config.eval_mode {
        EvalMode::Cv => evaluation::cross_validate(&dataset, &template, &eval_config)?,
        EvalMode::Split => evaluation::evaluate_split(&dataset, &template, &eval_config)?,
    };

    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    let report_path = config.out_dir.join("report.csv");
    fs::write(&report_path, evaluation::report_to_csv(&report))
        .with_context(|| format!("writing report to {}", report_path.display()))?;
    let per_k_path = config.out_dir.join("report_per_k.csv");
    fs::write(&per_k_path, evaluation::per_k_to_csv(&report))
        .with_context(|| format!("writing per-k report to {}", per_k_path.display()))?;

    let f = io::format_value;
    for method in &report.methods {
        let cells: Vec<String> = method
            .per_timepoint
            .iter()
            .map(|c| {
                format!(
                    "t{} mean {} ± {} best {}",
                    c.timepoint,
                    f(c.mean),
                    f(c.std_across_k),
                    f(c.best)
                )
            })
            .collect();
        println!("# {:<6} {}", method.method.label(), cells.join("; "));
    }
    println!("# report written to {}", report_path.display());
    Ok(())
}
