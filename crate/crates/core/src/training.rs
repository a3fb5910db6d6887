//! Minibatch training of `L_pred + lambda_ig * L_gcig + lambda_fair * L_fair`
//! with EMA baseline maintenance.
//!
//! The prediction and fairness terms are built on one tape per batch. The
//! attribution term is differentiated one instance at a time on a reused tape
//! and accumulated, which keeps the double-backprop graph small; its sum is
//! the same gradient [`total_loss`] produces on a single tape.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    disparity_graph, init_baselines, AttributionConfig, AttributionError, BaselineState,
};
use crate::autodiff::{Tape, Var};
use crate::data::{minibatches, Dataset};
use crate::derive_seed;
use crate::fairness::soft_eo_loss;
use crate::model::{init_params, Activation, MlpParams, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training rows contain no instances with y={y}, a={g}")]
    MissingCell { y: u8, g: u8 },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite gradient component {0}")]
    NonFiniteGradient(usize),
    #[error("gradient length {got} does not match {expected} parameters")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Weighting of the per-label attribution terms.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelWeighting {
    /// Plain sum of the per-label means.
    #[default]
    #[serde(rename = "algorithm1-sum", alias = "algorithm1_sum")]
    Algorithm1Sum,
    /// Per-label means weighted by the label's share of the batch.
    Empirical,
    /// Per-label means averaged.
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ig_steps: usize,
    pub ema_rate: f64,
    pub lambda_ig: f64,
    pub lambda_fair: f64,
    pub norm_q: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub use_pred: bool,
    pub use_gcig: bool,
    pub use_fair: bool,
    pub label_weighting: LabelWeighting,
    pub grad_clip_norm: Option<f64>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_layers: vec![64, 32],
            activation: Activation::Tanh,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 128,
            ig_steps: 16,
            ema_rate: 0.1,
            lambda_ig: 1.0,
            lambda_fair: 1.0,
            norm_q: 2.0,
            epsilon: 1e-8,
            seed: 0,
            use_pred: true,
            use_gcig: true,
            use_fair: true,
            label_weighting: LabelWeighting::Algorithm1Sum,
            grad_clip_norm: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda_ig >= 0.0) || !(self.lambda_fair >= 0.0) {
            return bad(format!(
                "lambdas must be non-negative (ig={}, fair={})",
                self.lambda_ig, self.lambda_fair
            ));
        }
        if self.ig_steps < 1 {
            return bad("ig_steps must be at least 1".into());
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return bad(format!(
                "ema_rate must lie in (0, 1), got {}",
                self.ema_rate
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.norm_q >= 1.0) {
            return bad(format!("norm_q must be at least 1, got {}", self.norm_q));
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            ));
        }
        Ok(())
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            steps: self.ig_steps,
            q: self.norm_q,
            epsilon: self.epsilon,
        }
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_layers.len() + 2);
        sizes.push(input_dim);
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        sizes
    }

    pub fn gcig_enabled(&self) -> bool {
        self.use_gcig && self.lambda_ig > 0.0
    }

    pub fn fair_enabled(&self) -> bool {
        self.use_fair && self.lambda_fair > 0.0
    }

    /// Applies one `key=value` override; the value is parsed as JSON, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), TrainError> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            TrainError::Config(format!("override `{assignment}` is not key=value"))
        })?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let obj = doc.as_object_mut().expect("config is an object");
        if !obj.contains_key(key.trim()) {
            return Err(TrainError::Config(format!(
                "unknown config key `{}`",
                key.trim()
            )));
        }
        obj.insert(key.trim().to_string(), value);
        *self = serde_json::from_value(doc)
            .map_err(|e| TrainError::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}

/// Per-epoch means of the loss terms over batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pred_loss: f64,
    pub gcig_loss: f64,
    pub fair_loss: f64,
    pub total_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Loss columns only, for comparisons that must ignore timing.
    pub fn losses(&self) -> Vec<[f64; 4]> {
        self.epochs
            .iter()
            .map(|r| [r.pred_loss, r.gcig_loss, r.fair_loss, r.total_loss])
            .collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|r| r.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Mean binary cross-entropy of logits against labels, as
/// `softplus(z) - y z`.
pub fn bce_loss(tape: &mut Tape, logits: &[Var], labels: &[u8]) -> Var {
    assert_eq!(
        logits.len(),
        labels.len(),
        "bce_loss: mismatched batch lengths"
    );
    let terms: Vec<Var> = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            if y == 1 {
                let nz = tape.neg(z);
                tape.softplus(nz)
            } else {
                tape.softplus(z)
            }
        })
        .collect();
    tape.mean(&terms)
}

/// Coefficient on each per-label mean of disparities.
fn label_weights(batch_labels: &[u8], weighting: LabelWeighting) -> [f64; 2] {
    let n1 = batch_labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = batch_labels.len() as f64;
    match weighting {
        LabelWeighting::Algorithm1Sum => [1.0, 1.0],
        LabelWeighting::Empirical => [(n - n1) / n, n1 / n],
        LabelWeighting::Equal => [0.5, 0.5],
    }
}

/// Weight of each instance's disparity in the batch attribution loss.
fn instance_weights(dataset: &Dataset, batch: &[usize], weighting: LabelWeighting) -> Vec<f64> {
    let labels: Vec<u8> = batch.iter().map(|&i| dataset.labels[i]).collect();
    let w = label_weights(&labels, weighting);
    let mut count = [0usize; 2];
    for &y in &labels {
        count[y as usize] += 1;
    }
    labels
        .iter()
        .map(|&y| w[y as usize] / count[y as usize] as f64)
        .collect()
}

fn constants(tape: &mut Tape, x: &[f64]) -> Vec<Var> {
    x.iter().map(|&v| tape.constant(v)).collect()
}

/// Attribution loss of a batch on one tape: for each label present, the mean
/// disparity over that label's instances, combined by `weighting`.
#[allow(clippy::too_many_arguments)]
pub fn gcig_batch_loss(
    tape: &mut Tape,
    model: &MlpParams,
    params: &[Var],
    dataset: &Dataset,
    batch: &[usize],
    state: &BaselineState,
    cfg: &AttributionConfig,
    weighting: LabelWeighting,
) -> Result<Var, AttributionError> {
    let weights = instance_weights(dataset, batch, weighting);
    let mut terms = Vec::with_capacity(batch.len());
    for (&i, &w) in batch.iter().zip(&weights) {
        let y = dataset.labels[i];
        let x = constants(tape, dataset.row(i));
        let v = disparity_graph(
            tape,
            model,
            params,
            &x,
            [state.baseline(y, 0), state.baseline(y, 1)],
            cfg,
        )?;
        terms.push(tape.scale(v, w));
    }
    Ok(tape.sum(&terms))
}

/// Graph nodes of the enabled loss terms and their weighted sum.
#[derive(Copy, Clone, Debug)]
pub struct LossNodes {
    pub pred: Option<Var>,
    pub gcig: Option<Var>,
    pub fair: Option<Var>,
    pub total: Var,
}

fn batch_logits(
    tape: &mut Tape,
    model: &MlpParams,
    params: &[Var],
    dataset: &Dataset,
    batch: &[usize],
) -> Result<Vec<Var>, ModelError> {
    batch
        .iter()
        .map(|&i| {
            let x = constants(tape, dataset.row(i));
            model.logit_graph(tape, params, &x)
        })
        .collect()
}

fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let parts: Vec<Var> = terms
        .iter()
        .map(|&(v, w)| if w == 1.0 { v } else { tape.scale(v, w) })
        .collect();
    tape.sum(&parts)
}

/// The full objective on one tape. Disabled terms build no nodes.
pub fn total_loss(
    tape: &mut Tape,
    model: &MlpParams,
    params: &[Var],
    dataset: &Dataset,
    batch: &[usize],
    state: &BaselineState,
    config: &TrainConfig,
) -> Result<LossNodes, TrainError> {
    let (pred, fair) = pred_and_fair(tape, model, params, dataset, batch, config)?;
    let gcig = if config.gcig_enabled() {
        Some(gcig_batch_loss(
            tape,
            model,
            params,
            dataset,
            batch,
            state,
            &config.attribution(),
            config.label_weighting,
        )?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(3);
    terms.extend(pred.map(|v| (v, 1.0)));
    terms.extend(gcig.map(|v| (v, config.lambda_ig)));
    terms.extend(fair.map(|v| (v, config.lambda_fair)));
    let total = weighted_sum(tape, &terms);
    Ok(LossNodes {
        pred,
        gcig,
        fair,
        total,
    })
}

fn pred_and_fair(
    tape: &mut Tape,
    model: &MlpParams,
    params: &[Var],
    dataset: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<(Option<Var>, Option<Var>), TrainError> {
    if !config.use_pred && !config.fair_enabled() {
        return Ok((None, None));
    }
    let logits = batch_logits(tape, model, params, dataset, batch)?;
    let labels: Vec<u8> = batch.iter().map(|&i| dataset.labels[i]).collect();
    let pred = config.use_pred.then(|| bce_loss(tape, &logits, &labels));
    let fair = if config.fair_enabled() {
        let groups: Vec<u8> = batch.iter().map(|&i| dataset.groups[i]).collect();
        Some(soft_eo_loss(tape, &logits, &labels, &groups))
    } else {
        None
    };
    Ok((pred, fair))
}

/// Values of the loss terms for one batch (disabled terms are 0).
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct LossValues {
    pub pred: f64,
    pub gcig: f64,
    pub fair: f64,
    pub total: f64,
}

/// Reusable tapes for [`loss_and_gradient`].
#[derive(Default)]
pub struct Workspace {
    batch: Tape,
    instance: Tape,
}

/// Loss values and `d total / d theta` for one batch. The attribution term is
/// differentiated instance by instance.
pub fn loss_and_gradient(
    model: &MlpParams,
    dataset: &Dataset,
    batch: &[usize],
    state: &BaselineState,
    config: &TrainConfig,
    ws: &mut Workspace,
) -> Result<(LossValues, Vec<f64>), TrainError> {
    let mut grad = vec![0.0; model.num_params()];
    let mut values = LossValues::default();

    let tape = &mut ws.batch;
    tape.clear();
    let params = model.param_vars(tape);
    let (pred, fair) = pred_and_fair(tape, model, &params, dataset, batch, config)?;
    let mut terms = Vec::with_capacity(2);
    terms.extend(pred.map(|v| (v, 1.0)));
    terms.extend(fair.map(|v| (v, config.lambda_fair)));
    if !terms.is_empty() {
        let head = weighted_sum(tape, &terms);
        let g = tape
            .gradient(head, &params)
            .expect("nodes belong to the tape");
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc = tape.value(*v);
        }
        values.pred = pred.map_or(0.0, |v| tape.value(v));
        values.fair = fair.map_or(0.0, |v| tape.value(v));
        values.total = tape.value(head);
    }

    if config.gcig_enabled() {
        let cfg = config.attribution();
        let weights = instance_weights(dataset, batch, config.label_weighting);
        let tape = &mut ws.instance;
        let mut gcig = 0.0;
        for (&i, &w) in batch.iter().zip(&weights) {
            tape.clear();
            let params = model.param_vars(tape);
            let y = dataset.labels[i];
            let x = constants(tape, dataset.row(i));
            let v = disparity_graph(
                tape,
                model,
                &params,
                &x,
                [state.baseline(y, 0), state.baseline(y, 1)],
                &cfg,
            )?;
            let g = tape.gradient(v, &params).expect("nodes belong to the tape");
            let coef = config.lambda_ig * w;
            for (acc, gv) in grad.iter_mut().zip(&g) {
                *acc += coef * tape.value(*gv);
            }
            gcig += w * tape.value(v);
        }
        values.gcig = gcig;
        values.total += config.lambda_ig * gcig;
    }
    Ok((values, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn check_grad(params: &[f64], grads: &[f64]) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::ShapeMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(k));
    }
    Ok(())
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<(), TrainError> {
    check_grad(params, grads)?;
    if state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch {
            expected: params.len(),
            got: state.m.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g;
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), TrainError> {
    check_grad(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Rescales `grads` to global norm `max_norm` when it is exceeded.
pub fn clip_gradient(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpParams,
    pub baselines: BaselineState,
    pub history: TrainHistory,
}

/// Seed stream for parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// Seed streams `EPOCH_STREAM + e` shuffle epoch `e`.
pub const EPOCH_STREAM: u64 = 1 << 32;

/// Trains a fresh model on `train` rows of `dataset`.
pub fn fairx_train(
    config: &TrainConfig,
    dataset: &Dataset,
    train: &[usize],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let counts = dataset.cell_counts(train);
    for y in 0..2u8 {
        for g in 0..2u8 {
            if counts[y as usize][g as usize] == 0 {
                return Err(TrainError::MissingCell { y, g });
            }
        }
    }
    let sizes = config.layer_sizes(dataset.n_features);
    let mut model = init_params(
        &sizes,
        config.activation,
        derive_seed(config.seed, INIT_STREAM),
    )?;
    let mut baselines = init_baselines(dataset, train, config.ema_rate)?;
    let mut adam = AdamState::new(model.num_params());
    let mut ws = Workspace::default();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let batches = minibatches(
            train,
            config.batch_size,
            derive_seed(config.seed, EPOCH_STREAM + epoch as u64),
        );
        let mut sums = LossValues::default();
        for (b, batch) in batches.iter().enumerate() {
            baselines.update(dataset, batch);
            let (values, mut grad) =
                loss_and_gradient(&model, dataset, batch, &baselines, config, &mut ws)?;
            if !values.total.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: b,
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: b,
                });
            }
            if let Some(c) = config.grad_clip_norm {
                clip_gradient(&mut grad, c);
            }
            match config.optimizer {
                OptimizerKind::Adam => {
                    adam_step(&mut adam, &mut model.weights, &grad, config.learning_rate)?
                }
                OptimizerKind::Sgd => sgd_step(&mut model.weights, &grad, config.learning_rate)?,
            }
            sums.pred += values.pred;
            sums.gcig += values.gcig;
            sums.fair += values.fair;
            sums.total += values.total;
        }
        let nb = batches.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            pred_loss: sums.pred / nb,
            gcig_loss: sums.gcig / nb,
            fair_loss: sums.fair / nb,
            total_loss: sums.total / nb,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: pred {:.4} gcig {:.4} fair {:.4} total {:.4} ({:.2}s)",
            record.pred_loss,
            record.gcig_loss,
            record.fair_loss,
            record.total_loss,
            record.seconds
        );
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        model,
        baselines,
        history,
    })
}
