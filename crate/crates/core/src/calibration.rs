// SPDX-License-Identifier: MIT OR Apache-2.0

//! Drop ratios and merge weights from importance reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::importance::ImportanceReport;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 5.0;

/// Base drop ratio `ratio`, clamp half-width `epsilon`, and temperatures for
/// the ratio curve (`tau1`) and the merge softmax (`tau2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    ratio: f64,
    epsilon: f64,
    tau1: f64,
    tau2: f64,
}

fn check_band(ratio: f64, epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("drop ratio {ratio} must lie in [0, 1)")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
    }
    if ratio - epsilon < 0.0 || ratio + epsilon >= 1.0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} +/- epsilon {epsilon} must stay within [0, 1)"
        )));
    }
    Ok(())
}

impl CalibrationConfig {
    pub fn new(ratio: f64, epsilon: f64, tau1: f64, tau2: f64) -> Result<Self> {
        check_band(ratio, epsilon)?;
        for (name, t) in [("tau1", tau1), ("tau2", tau2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} = {t} must be positive and finite")));
            }
        }
        Ok(Self {
            ratio,
            epsilon,
            tau1,
            tau2,
        })
    }

    pub fn with_defaults(ratio: f64, epsilon: f64) -> Result<Self> {
        Self::new(ratio, epsilon, DEFAULT_TAU, DEFAULT_TAU)
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn tau1(&self) -> f64 {
        self.tau1
    }
    pub fn tau2(&self) -> f64 {
        self.tau2
    }
}

/// Clamped tanh offset for one signed score.
pub fn tanh_ratio(score: f64, cfg: &CalibrationConfig) -> f64 {
    let beta = (score / cfg.tau1).tanh();
    if beta < -cfg.epsilon {
        cfg.ratio - cfg.epsilon
    } else if beta > cfg.epsilon {
        cfg.ratio + cfg.epsilon
    } else {
        cfg.ratio + beta
    }
}

/// `ratio + tanh(score / tau1)`, clamped to `[ratio - eps, ratio + eps]`.
pub fn tanh_drop_ratios(report: &ImportanceReport, cfg: &CalibrationConfig) -> Result<BTreeMap<String, f64>> {
    if report.entries.is_empty() {
        return Err(Error::invalid("importance report has no entries"));
    }
    Ok(report
        .entries
        .iter()
        .map(|e| (e.id.clone(), tanh_ratio(e.score, cfg)))
        .collect())
}

/// Rank-based linear ratios: the most important partition gets
/// `ratio - eps`, the least important `ratio + eps`, evenly spaced between.
///
/// The mean ratio is exactly `ratio`, so with equal-sized partitions the
/// expected number of kept parameters matches uniform pruning.
pub fn linear_rank_drop_ratios(
    report: &ImportanceReport,
    ratio: f64,
    epsilon: f64,
) -> Result<BTreeMap<String, f64>> {
    check_band(ratio, epsilon)?;
    let n = report.entries.len();
    if n == 0 {
        return Err(Error::invalid("importance report has no entries"));
    }
    let counts: Vec<usize> = report.entries.iter().map(|e| e.elements).collect();
    if counts.iter().any(|&c| c != counts[0]) {
        log::warn!(
            "partitions of {:?} differ in size; linear ratios keep the mean ratio but not the kept-parameter total",
            report.task_id
        );
    }
    let mut order: Vec<&crate::importance::ImportanceEntry> = report.entries.iter().collect();
    order.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then_with(|| a.id.cmp(&b.id)));
    Ok(order
        .iter()
        .enumerate()
        .map(|(r, e)| {
            let lam = if n == 1 {
                ratio
            } else {
                ratio - epsilon + 2.0 * epsilon * r as f64 / (n - 1) as f64
            };
            (e.id.clone(), lam)
        })
        .collect())
}

/// Softmax of model importance magnitudes over temperature `tau2`.
pub fn merge_weights(model_magnitudes: &[(String, f64)], tau2: f64) -> Result<BTreeMap<String, f64>> {
    if model_magnitudes.is_empty() {
        return Err(Error::invalid("merge weights need at least one model"));
    }
    if !(tau2 > 0.0) {
        return Err(Error::invalid(format!("tau2 = {tau2} must be positive")));
    }
    let max = model_magnitudes
        .iter()
        .map(|(_, m)| m / tau2)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = model_magnitudes.iter().map(|(_, m)| (m / tau2 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = BTreeMap::new();
    for ((id, _), e) in model_magnitudes.iter().zip(exps) {
        if out.insert(id.clone(), e / total).is_some() {
            return Err(Error::invalid(format!("task {id:?} appears twice")));
        }
    }
    Ok(out)
}
