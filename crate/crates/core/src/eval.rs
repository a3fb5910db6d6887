//! Evaluation metrics, cross-validated experiment drivers (folds, ablation
//! arms, lambda sweeps) and the correlation analysis between fold-level
//! fairness and explanation disparity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::attribution::{disparity_on, AttributionConfig, AttributionError, BaselineState};
use crate::autodiff::Tape;
use crate::data::{kfold, CellCounts, DataError, Dataset, PreprocessStats, RawTable};
use crate::fairness::{eo_gap, FairnessError};
use crate::model::{predict_from_logit, MlpParams, ModelError};
use crate::training::{fairx_train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("AUC needs both classes; only label {0} present")]
    SingleClass(u8),
    #[error("{0} is constant; correlation undefined")]
    ConstantInput(&'static str),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("every fold failed; first error: {0}")]
    AllFoldsFailed(String),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is predicted or labelled positive.
pub fn f1_score(predictions: &[u8], labels: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC with half credit for tied scores.
pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(EvalError::SingleClass(0));
    }
    if n_neg == 0 {
        return Err(EvalError::SingleClass(1));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean disparity over `indices` against the frozen `state`.
pub fn gcig_metric(
    model: &MlpParams,
    state: &BaselineState,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AttributionConfig,
) -> Result<f64, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut tape = Tape::new();
    let mut total = 0.0;
    for &i in indices {
        total += disparity_on(
            &mut tape,
            model,
            dataset.row(i),
            dataset.labels[i],
            state,
            cfg,
        )?;
    }
    Ok(total / indices.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub f1: f64,
    pub auc: f64,
    pub eo_gap: f64,
    pub gcig: f64,
    pub accuracy: f64,
    pub n: usize,
    /// Instances per `[y][a]` cell.
    pub cell_counts: CellCounts,
    pub config_fingerprint: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

/// Hex SHA-256 prefix of the config's JSON form.
pub fn config_fingerprint(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn evaluate_model(
    model: &MlpParams,
    state: &BaselineState,
    dataset: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<RunMetrics, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut scores = Vec::with_capacity(indices.len());
    let mut preds = Vec::with_capacity(indices.len());
    for &i in indices {
        let z = model.logit(dataset.row(i))?;
        scores.push(z);
        preds.push(predict_from_logit(z, config.threshold));
    }
    let labels: Vec<u8> = indices.iter().map(|&i| dataset.labels[i]).collect();
    let groups: Vec<u8> = indices.iter().map(|&i| dataset.groups[i]).collect();
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(RunMetrics {
        f1: f1_score(&preds, &labels),
        auc: auc_score(&scores, &labels)?,
        eo_gap: eo_gap(&preds, &labels, &groups)?,
        gcig: gcig_metric(model, state, dataset, indices, &config.attribution())?,
        accuracy: correct as f64 / indices.len() as f64,
        n: indices.len(),
        cell_counts: dataset.cell_counts(indices),
        config_fingerprint: config_fingerprint(config),
        seed: config.seed,
        fold: None,
    })
}

/// One value per reported metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: f64,
    pub auc: f64,
    pub eo_gap: f64,
    pub gcig: f64,
    pub accuracy: f64,
}

pub const METRIC_NAMES: [&str; 5] = ["f1", "auc", "eo_gap", "gcig", "accuracy"];

impl MetricValues {
    pub fn of(m: &RunMetrics) -> Self {
        MetricValues {
            f1: m.f1,
            auc: m.auc,
            eo_gap: m.eo_gap,
            gcig: m.gcig,
            accuracy: m.accuracy,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "f1" => self.f1,
            "auc" => self.auc,
            "eo_gap" => self.eo_gap,
            "gcig" => self.gcig,
            "accuracy" => self.accuracy,
            _ => return None,
        })
    }

    fn map(f: impl Fn(&str) -> f64) -> Self {
        MetricValues {
            f1: f("f1"),
            auc: f("auc"),
            eo_gap: f("eo_gap"),
            gcig: f("gcig"),
            accuracy: f("accuracy"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub k: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub folds: Vec<RunMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FoldFailure>,
    pub mean: MetricValues,
    /// Sample standard deviation (n - 1 denominator); 0 for a single fold.
    pub std: MetricValues,
}

impl CvSummary {
    /// # Panics
    /// If `folds` is empty.
    pub fn from_folds(
        k: usize,
        seed: u64,
        config: &TrainConfig,
        folds: Vec<RunMetrics>,
        failures: Vec<FoldFailure>,
    ) -> Self {
        assert!(!folds.is_empty(), "summary needs at least one fold");
        let n = folds.len() as f64;
        let mean = MetricValues::map(|name| {
            folds
                .iter()
                .map(|m| MetricValues::of(m).get(name).unwrap())
                .sum::<f64>()
                / n
        });
        let std = MetricValues::map(|name| {
            let first = MetricValues::of(&folds[0]).get(name).unwrap();
            if folds
                .iter()
                .all(|m| MetricValues::of(m).get(name).unwrap() == first)
            {
                return 0.0;
            }
            let mu = mean.get(name).unwrap();
            let ss: f64 = folds
                .iter()
                .map(|m| (MetricValues::of(m).get(name).unwrap() - mu).powi(2))
                .sum();
            (ss / (n - 1.0)).sqrt()
        });
        CvSummary {
            k,
            seed,
            config_fingerprint: config_fingerprint(config),
            folds,
            failures,
            mean,
            std,
        }
    }
}

/// Runs `f` on a pool of `threads` workers (0 = available parallelism).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

fn run_fold(
    config: &TrainConfig,
    table: &RawTable,
    train: &[usize],
    test: &[usize],
) -> Result<RunMetrics, EvalError> {
    let stats = PreprocessStats::fit(table, train)?;
    let dataset = stats.transform(table)?;
    let out = fairx_train(config, &dataset, train)?;
    evaluate_model(&out.model, &out.baselines, &dataset, test, config)
}

/// Stratified `k`-fold cross-validation. Preprocessing is refit on each
/// fold's training rows; failed folds are reported and skipped.
pub fn crossvalidate(
    config: &TrainConfig,
    table: &RawTable,
    k: usize,
    seed: u64,
    threads: usize,
) -> Result<CvSummary, EvalError> {
    config.validate()?;
    let folds = kfold(table, k, seed)?;
    let results: Vec<Result<RunMetrics, EvalError>> = with_threads(threads, || {
        folds
            .par_iter()
            .map(|f| run_fold(config, table, &f.train, &f.test))
            .collect()
    })?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (f, r) in folds.iter().zip(results) {
        match r {
            Ok(mut m) => {
                m.fold = Some(f.index);
                done.push(m);
            }
            Err(e) => {
                log::warn!("fold {} failed: {e}", f.index);
                failures.push(FoldFailure {
                    fold: f.index,
                    error: e.to_string(),
                });
            }
        }
    }
    if done.is_empty() {
        return Err(EvalError::AllFoldsFailed(
            failures
                .first()
                .map(|f| f.error.clone())
                .unwrap_or_default(),
        ));
    }
    Ok(CvSummary::from_folds(k, seed, config, done, failures))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    PredictionOnly,
    PredEo,
    PredGcig,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::PredictionOnly, Arm::PredEo, Arm::PredGcig, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::PredictionOnly => "prediction_only",
            Arm::PredEo => "pred_eo",
            Arm::PredGcig => "pred_gcig",
            Arm::Full => "full",
        }
    }

    /// `config` with this arm's disabled terms zeroed.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Arm::PredictionOnly => {
                c.lambda_ig = 0.0;
                c.lambda_fair = 0.0;
            }
            Arm::PredEo => c.lambda_ig = 0.0,
            Arm::PredGcig => c.lambda_fair = 0.0,
            Arm::Full => {}
        }
        c
    }
}

/// Relative change `(arm - base) / base` in percent.
pub fn percent_change(arm: f64, base: f64) -> f64 {
    100.0 * (arm - base) / base
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub summary: CvSummary,
    /// Percent change of each mean metric relative to the prediction-only arm.
    pub pct_change: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms
            .iter()
            .find(|a| a.arm == arm)
            .expect("every arm is present")
    }

    /// Arm with the smallest mean GCIG disparity.
    pub fn lowest_gcig(&self) -> Arm {
        self.arms
            .iter()
            .min_by(|a, b| a.summary.mean.gcig.total_cmp(&b.summary.mean.gcig))
            .expect("four arms")
            .arm
    }
}

pub fn ablation(
    config: &TrainConfig,
    table: &RawTable,
    k: usize,
    seed: u64,
    threads: usize,
) -> Result<AblationReport, EvalError> {
    let summaries = Arm::ALL
        .iter()
        .map(|&arm| crossvalidate(&arm.apply(config), table, k, seed, threads))
        .collect::<Result<Vec<_>, _>>()?;
    let base = summaries[0].mean;
    let arms = Arm::ALL
        .iter()
        .zip(summaries)
        .map(|(&arm, summary)| {
            let pct_change = MetricValues::map(|name| {
                percent_change(summary.mean.get(name).unwrap(), base.get(name).unwrap())
            });
            ArmResult {
                arm,
                summary,
                pct_change,
            }
        })
        .collect();
    Ok(AblationReport { arms })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaIg,
    LambdaFair,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaIg => "lambda_ig",
            SweepAxis::LambdaFair => "lambda_fair",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda_ig" => Some(SweepAxis::LambdaIg),
            "lambda_fair" => Some(SweepAxis::LambdaFair),
            _ => None,
        }
    }
}

pub const DEFAULT_SWEEP: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Value of the lambda not being swept.
    pub fixed_other: f64,
    pub k: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, k: usize, seed: u64) -> Self {
        SweepSpec {
            axis,
            values: DEFAULT_SWEEP.to_vec(),
            fixed_other: 1.0,
            k,
            seed,
        }
    }

    pub fn config_at(&self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = base.clone();
        match self.axis {
            SweepAxis::LambdaIg => {
                c.lambda_ig = value;
                c.lambda_fair = self.fixed_other;
            }
            SweepAxis::LambdaFair => {
                c.lambda_fair = value;
                c.lambda_ig = self.fixed_other;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub summary: CvSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub fixed_other: f64,
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub lambda: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

impl SweepResult {
    /// Long-format table: one row per (grid point, metric).
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::with_capacity(self.points.len() * METRIC_NAMES.len());
        for p in &self.points {
            for name in METRIC_NAMES {
                rows.push(SweepRow {
                    axis: self.axis.name().to_string(),
                    lambda: p.lambda,
                    metric: name.to_string(),
                    mean: p.summary.mean.get(name).unwrap(),
                    std: p.summary.std.get(name).unwrap(),
                });
            }
        }
        rows
    }

    /// Number of grid steps (in ascending lambda order) where `metric`'s mean
    /// increases.
    pub fn increases(&self, metric: &str) -> usize {
        let mut pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.lambda, p.summary.mean.get(metric).unwrap_or(f64::NAN)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2).filter(|w| w[1].1 > w[0].1).count()
    }
}

pub fn sensitivity_sweep(
    config: &TrainConfig,
    table: &RawTable,
    spec: &SweepSpec,
    threads: usize,
) -> Result<SweepResult, EvalError> {
    let points = spec
        .values
        .iter()
        .map(|&v| {
            let summary = crossvalidate(
                &spec.config_at(config, v),
                table,
                spec.k,
                spec.seed,
                threads,
            )?;
            Ok(SweepPoint { lambda: v, summary })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SweepResult {
        axis: spec.axis,
        fixed_other: spec.fixed_other,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    /// Two-sided p-value of the Pearson coefficient.
    pub p_value: f64,
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<(), EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(EvalError::TooFewPoints {
            needed: 3,
            got: x.len(),
        });
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(EvalError::ConstantInput("x"));
    }
    if syy == 0.0 {
        return Err(EvalError::ConstantInput("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` from `t = r sqrt((n-2)/(1-r^2))` with `n - 2`
/// degrees of freedom.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn correlate(x: &[f64], y: &[f64]) -> Result<Correlation, EvalError> {
    check_pairs(x, y)?;
    let r = pearson(x, y)?;
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    Ok(Correlation {
        n: x.len(),
        pearson: r,
        spearman: rho,
        p_value: pearson_p_value(r, x.len()),
    })
}

fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64), EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EvalError::ConstantInput("x"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Coefficient of determination of the least-squares line `y ~ a + b x`.
pub fn regress_r2(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pairs(x, y)?;
    let (a, b) = ols(x, y)?;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantInput("y"));
    }
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| (yi - a - b * xi).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn residuals(x: &[f64], control: &[f64]) -> Result<Vec<f64>, EvalError> {
    let (a, b) = ols(control, x)?;
    Ok(x.iter()
        .zip(control)
        .map(|(xi, ci)| xi - a - b * ci)
        .collect())
}

/// Pearson correlation of `x` and `y` after regressing each on `control`.
pub fn partial_correlation(x: &[f64], y: &[f64], control: &[f64]) -> Result<f64, EvalError> {
    check_pairs(x, y)?;
    check_pairs(x, control)?;
    pearson(&residuals(x, control)?, &residuals(y, control)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub correlation: Correlation,
    pub r2: f64,
    /// Controlling for F1; absent when F1 is constant across runs.
    pub partial_given_f1: Option<f64>,
}

/// EO gap against GCIG disparity across fold-level records.
pub fn eo_gcig_report(records: &[RunMetrics]) -> Result<CorrelationReport, EvalError> {
    let eo: Vec<f64> = records.iter().map(|m| m.eo_gap).collect();
    let gcig: Vec<f64> = records.iter().map(|m| m.gcig).collect();
    let f1: Vec<f64> = records.iter().map(|m| m.f1).collect();
    let correlation = correlate(&eo, &gcig)?;
    let r2 = regress_r2(&eo, &gcig)?;
    let partial_given_f1 = partial_correlation(&eo, &gcig, &f1).ok();
    Ok(CorrelationReport {
        correlation,
        r2,
        partial_given_f1,
    })
}
