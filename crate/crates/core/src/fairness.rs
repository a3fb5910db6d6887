//! Equalized-odds metrics on hard predictions and a sigmoid-relaxed surrogate
//! usable as a training penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FairnessError {
    #[error("length mismatch: {predictions} predictions, {labels} labels, {groups} groups")]
    LengthMismatch {
        predictions: usize,
        labels: usize,
        groups: usize,
    },
    #[error("non-binary entry at index {0}")]
    NonBinary(usize),
    #[error("rate undefined: no instances with y={y} in group {g}")]
    EmptyCell { y: u8, g: u8 },
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }
}

/// Per-group true and false positive rates. A rate is `None` when its
/// denominator cell is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub confusion: [Confusion; 2],
    pub tpr: [Option<f64>; 2],
    pub fpr: [Option<f64>; 2],
}

impl GroupRates {
    fn rate(&self, y: u8, g: u8) -> Result<f64, FairnessError> {
        let r = if y == 1 {
            self.tpr[g as usize]
        } else {
            self.fpr[g as usize]
        };
        r.ok_or(FairnessError::EmptyCell { y, g })
    }

    pub fn tpr_gap(&self) -> Result<f64, FairnessError> {
        Ok((self.rate(1, 0)? - self.rate(1, 1)?).abs())
    }

    pub fn fpr_gap(&self) -> Result<f64, FairnessError> {
        Ok((self.rate(0, 0)? - self.rate(0, 1)?).abs())
    }

    /// `|TPR_0 - TPR_1| + |FPR_0 - FPR_1|`.
    pub fn eo_gap(&self) -> Result<f64, FairnessError> {
        Ok(self.tpr_gap()? + self.fpr_gap()?)
    }
}

fn check_inputs(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<(), FairnessError> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(FairnessError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
            groups: groups.len(),
        });
    }
    for i in 0..labels.len() {
        if predictions[i] > 1 || labels[i] > 1 || groups[i] > 1 {
            return Err(FairnessError::NonBinary(i));
        }
    }
    Ok(())
}

pub fn group_rates(
    predictions: &[u8],
    labels: &[u8],
    groups: &[u8],
) -> Result<GroupRates, FairnessError> {
    check_inputs(predictions, labels, groups)?;
    let mut confusion = [Confusion::default(); 2];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        let c = &mut confusion[g as usize];
        match (y, p) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fn_ += 1,
            (_, 1) => c.fp += 1,
            _ => c.tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(GroupRates {
        tpr: [0, 1].map(|g| ratio(confusion[g].tp, confusion[g].positives())),
        fpr: [0, 1].map(|g| ratio(confusion[g].fp, confusion[g].negatives())),
        confusion,
    })
}

pub fn eo_gap(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<f64, FairnessError> {
    group_rates(predictions, labels, groups)?.eo_gap()
}

/// Differentiable equalized-odds surrogate on a batch of logit nodes: soft
/// rates are group means of `sigmoid(logit)` within each label class, and the
/// loss is the smoothed absolute difference of those rates summed over both
/// classes. A class with either group absent from the batch contributes 0.
///
/// # Panics
/// If the slice lengths differ.
pub fn soft_eo_loss(tape: &mut Tape, logits: &[Var], labels: &[u8], groups: &[u8]) -> Var {
    assert!(
        logits.len() == labels.len() && labels.len() == groups.len(),
        "soft_eo_loss: mismatched batch lengths"
    );
    let mut cells: [[Vec<Var>; 2]; 2] = Default::default();
    for ((&z, &y), &g) in logits.iter().zip(labels).zip(groups) {
        let s = tape.sigmoid(z);
        cells[y as usize][g as usize].push(s);
    }
    let mut terms = Vec::with_capacity(2);
    for (y, by_group) in cells.iter().enumerate().rev() {
        if by_group.iter().any(Vec::is_empty) {
            log::debug!("soft EO: label {y} lacks a group in this batch; term skipped");
            continue;
        }
        let r0 = tape.mean(&by_group[0]);
        let r1 = tape.mean(&by_group[1]);
        let d = tape.sub(r0, r1);
        terms.push(tape.abs_smooth(d));
    }
    match terms.len() {
        0 => tape.constant(0.0),
        1 => terms[0],
        _ => tape.sum(&terms),
    }
}
