//! `fairx` command line: reproducible train / eval / cross-validation /
//! ablation / sweep runs that write JSON and CSV files, plus a synthetic data
//! generator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, BaselineState};
use crate::data::{
    load_csv, stratified_split, synth_biased_with, DataError, DatasetManifest, PreprocessStats,
    RawTable, SplitIndices, SynthSpec, DEFAULT_SPLIT,
};
use crate::eval::{
    ablation, crossvalidate, eo_gcig_report, evaluate_model, sensitivity_sweep, AblationReport,
    CorrelationReport, EvalError, RunMetrics, SweepAxis, SweepSpec, DEFAULT_SWEEP,
};
use crate::fairness::FairnessError;
use crate::model::MlpParams;
use crate::training::{fairx_train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::NonFiniteGradient(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Attribution(
                AttributionError::InvalidGamma(_) | AttributionError::InvalidSteps,
            ) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Data(d) => d.into(),
            EvalError::ThreadPool(_) => CliError::Config(e.to_string()),
            EvalError::AllFoldsFailed(_) => CliError::Numerical(e.to_string()),
            EvalError::Fairness(FairnessError::EmptyCell { .. })
            | EvalError::SingleClass(_)
            | EvalError::EmptyEvaluation => CliError::Data(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fairx",
    version,
    about = "Train and evaluate explanation-invariant tabular classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that trains models.
#[derive(Debug, Clone, Args)]
pub struct RunSpec {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config seed; also seeds splits and folds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` applied onto the config; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Concurrent runs (0 = available parallelism).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

impl SplitName {
    fn key(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a stratified 60/20/20 split and report metrics per split.
    Train {
        #[command(flatten)]
        run: RunSpec,
        /// Train/validation/test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        split: Option<Vec<f64>>,
    },
    /// Re-evaluate a saved model on one split of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Xval {
        #[command(flatten)]
        run: RunSpec,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Cross-validate the four loss-component arms.
    Ablate {
        #[command(flatten)]
        run: RunSpec,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Cross-validate a grid of one lambda, the other held fixed.
    Sweep {
        #[command(flatten)]
        run: RunSpec,
        /// `lambda_ig` or `lambda_fair`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Value of the lambda not being swept.
        #[arg(long, default_value_t = 1.0)]
        fixed: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Write a synthetic dataset with a group-dependent labelling rule.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        group_shift: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything needed to re-apply a trained model to raw data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: MlpParams,
    pub baselines: BaselineState,
    pub preprocessing: PreprocessStats,
    pub config: TrainConfig,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
}

pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CV_FILE: &str = "cv_summary.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SYNTH_CSV: &str = "synth.csv";
pub const SYNTH_MANIFEST: &str = "manifest.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Config from file (or defaults), with overrides and seed applied, validated.
pub fn resolve_config(run: &RunSpec) -> Result<TrainConfig, CliError> {
    let mut config = match &run.config {
        Some(path) => read_json::<TrainConfig>(path).map_err(CliError::Config)?,
        None => TrainConfig::default(),
    };
    for o in &run.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_table(manifest: &Path) -> Result<RawTable, CliError> {
    let manifest = DatasetManifest::from_file(manifest)?;
    let table = load_csv(&manifest)?;
    let r = &table.report;
    log::info!(
        "{}: {} rows read, {} kept ({} missing target, {} missing protected, {} filtered)",
        manifest.name,
        r.rows_read,
        r.rows_retained,
        r.dropped_missing_target,
        r.dropped_missing_protected,
        r.dropped_by_filter
    );
    Ok(table)
}

fn split_indices(split: &SplitIndices, name: SplitName, n: usize) -> Vec<usize> {
    match name {
        SplitName::Train => split.train.clone(),
        SplitName::Validation => split.validation.clone(),
        SplitName::Test => split.test.clone(),
        SplitName::All => (0..n).collect(),
    }
}

pub fn cmd_train(run: &RunSpec, ratios: Option<&[f64]>) -> Result<(), CliError> {
    let config = resolve_config(run)?;
    let ratios: [f64; 3] = match ratios {
        Some(r) => r
            .try_into()
            .map_err(|_| CliError::Config("--split takes three fractions".into()))?,
        None => DEFAULT_SPLIT,
    };
    let table = load_table(&run.manifest)?;
    let split = stratified_split(&table, ratios, config.seed)?;
    let stats = PreprocessStats::fit(&table, &split.train)?;
    let dataset = stats.transform(&table)?;
    let out = fairx_train(&config, &dataset, &split.train)?;

    let mut metrics = BTreeMap::new();
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let idx = split_indices(&split, name, dataset.len());
        metrics.insert(
            name.key(),
            evaluate_model(&out.model, &out.baselines, &dataset, &idx, &config)?,
        );
    }
    create_dir(&run.out)?;
    let model = ModelFile {
        model: out.model,
        baselines: out.baselines,
        preprocessing: stats,
        config,
        split_seed: split.seed,
        split_ratios: ratios,
    };
    write_json(&run.out, MODEL_FILE, &model)?;
    write_file(&run.out, HISTORY_FILE, out.history.to_jsonl().as_bytes())?;
    write_json(&run.out, METRICS_FILE, &metrics)
}

pub fn cmd_eval(
    model_path: &Path,
    manifest: &Path,
    split: SplitName,
    out: &Path,
) -> Result<(), CliError> {
    let file: ModelFile = read_json(model_path).map_err(CliError::Data)?;
    let table = load_table(manifest)?;
    let dataset = file.preprocessing.transform(&table)?;
    if dataset.n_features != file.model.input_dim() {
        return Err(CliError::Data(format!(
            "encoded width {} does not match the model input {}",
            dataset.n_features,
            file.model.input_dim()
        )));
    }
    let idx = match split {
        SplitName::All => dataset.all_indices(),
        _ => split_indices(
            &stratified_split(&table, file.split_ratios, file.split_seed)?,
            split,
            dataset.len(),
        ),
    };
    let m = evaluate_model(&file.model, &file.baselines, &dataset, &idx, &file.config)?;
    create_dir(out)?;
    let mut metrics = BTreeMap::new();
    metrics.insert(split.key(), m);
    write_json(out, METRICS_FILE, &metrics)
}

pub fn cmd_xval(run: &RunSpec, k: usize) -> Result<(), CliError> {
    let config = resolve_config(run)?;
    let table = load_table(&run.manifest)?;
    let summary = crossvalidate(&config, &table, k, config.seed, run.threads)?;
    create_dir(&run.out)?;
    write_json(&run.out, CV_FILE, &summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationFile {
    #[serde(flatten)]
    pub report: AblationReport,
    /// EO gap against GCIG across every fold of every arm.
    pub eo_gcig_correlation: Option<CorrelationReport>,
}

pub fn cmd_ablate(run: &RunSpec, k: usize) -> Result<(), CliError> {
    let config = resolve_config(run)?;
    let table = load_table(&run.manifest)?;
    let report = ablation(&config, &table, k, config.seed, run.threads)?;
    let folds: Vec<RunMetrics> = report
        .arms
        .iter()
        .flat_map(|a| a.summary.folds.clone())
        .collect();
    let eo_gcig_correlation = match eo_gcig_report(&folds) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("correlation skipped: {e}");
            None
        }
    };
    create_dir(&run.out)?;
    write_json(
        &run.out,
        ABLATION_FILE,
        &AblationFile {
            report,
            eo_gcig_correlation,
        },
    )
}

pub fn cmd_sweep(
    run: &RunSpec,
    axis: &str,
    values: Option<&[f64]>,
    fixed: f64,
    k: usize,
) -> Result<(), CliError> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| {
        CliError::Config(format!(
            "--axis must be lambda_ig or lambda_fair, got `{axis}`"
        ))
    })?;
    let values = values.map_or_else(|| DEFAULT_SWEEP.to_vec(), <[f64]>::to_vec);
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) {
        return Err(CliError::Config(
            "--values must be non-negative numbers".into(),
        ));
    }
    let config = resolve_config(run)?;
    let table = load_table(&run.manifest)?;
    let spec = SweepSpec {
        axis,
        values,
        fixed_other: fixed,
        k,
        seed: config.seed,
    };
    let result = sensitivity_sweep(&config, &table, &spec, run.threads)?;
    create_dir(&run.out)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in result.rows() {
        csv.serialize(row)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = csv
        .into_inner()
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&run.out, SWEEP_CSV, &bytes)?;
    write_json(&run.out, SWEEP_JSON, &result)
}

pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<(), CliError> {
    let d = synth_biased_with(spec)?;
    create_dir(out)?;
    let mut text = Vec::new();
    let header: Vec<String> = d
        .feature_names
        .iter()
        .cloned()
        .chain(["a".to_string(), "y".to_string()])
        .collect();
    writeln!(text, "{}", header.join(",")).expect("write to vec");
    for i in 0..d.len() {
        let row: Vec<String> = d.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(text, "{},{},{}", row.join(","), d.groups[i], d.labels[i]).expect("write to vec");
    }
    write_file(out, SYNTH_CSV, &text)?;
    let mut manifest = DatasetManifest::new(SYNTH_CSV, "y", "1", "a", "1");
    manifest.name = format!(
        "synthetic (n={}, p={}, beta={}, seed={})",
        spec.n, spec.p, spec.beta, spec.seed
    );
    write_json(out, SYNTH_MANIFEST, &manifest)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, split } => cmd_train(&run, split.as_deref()),
        Command::Eval {
            model,
            manifest,
            split,
            out,
        } => cmd_eval(&model, &manifest, split, &out),
        Command::Xval { run, k } => cmd_xval(&run, k),
        Command::Ablate { run, k } => cmd_ablate(&run, k),
        Command::Sweep {
            run,
            axis,
            values,
            fixed,
            k,
        } => cmd_sweep(&run, &axis, values.as_deref(), fixed, k),
        Command::Synth {
            n,
            p,
            beta,
            noise,
            group_shift,
            seed,
            out,
        } => cmd_synth(
            &SynthSpec {
                n,
                p,
                beta,
                noise,
                group_shift,
                seed,
            },
            &out,
        ),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fairx: {e}");
            e.exit_code()
        }
    }
}
