// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pruning comparison on toy tasks: Magnitude vs. Dare vs. APL with linear
//! rank ratios, over a sweep of drop ratios and mask seeds.
//!
//! For every task the lab fine-tunes a net from a shared pretrained base.
//! Each method prunes that task's delta at ratio `r`, the pruned net is
//! rebuilt from the base and scored on the task's test split. Dare and APL
//! draw their masks from the same counter-based stream for a given seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::linear_rank_drop_ratios;
use crate::delta::{apply_mask, compute_delta, make_mask, DropMode, DropRatios, Rescale};
use crate::importance::{causal_importance, gradient_importance, ImportanceReport, Provider};
use crate::merge::task_seed;
use crate::partition::{build_partitions, Level};
use crate::toy::{evaluate, Lab, LabConfig, ToyEvaluator};
use crate::{Error, Result, TensorMap};

pub const CSV_VERSION: u32 = 1;

/// Thresholds searched for APL, largest first.
pub const EPSILON_GRID: [f64; 6] = [0.1, 0.05, 0.01, 0.005, 0.001, 0.0005];

/// Default sweep of base drop ratios.
pub const RATIO_GRID: [f64; 8] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    Magnitude,
    Dare,
    AplLinear,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::Magnitude, BenchMethod::Dare, BenchMethod::AplLinear];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Magnitude => "magnitude",
            BenchMethod::Dare => "dare",
            BenchMethod::AplLinear => "apl-linear",
        }
    }
}

/// Largest grid threshold that keeps `[ratio - eps, ratio + eps]` inside `[0, 1)`.
pub fn default_epsilon(ratio: f64) -> Option<f64> {
    EPSILON_GRID
        .iter()
        .copied()
        .find(|&e| ratio - e >= 0.0 && ratio + e < 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lab: LabConfig,
    pub lab_seed: u64,
    pub tasks: usize,
    pub ratios: Vec<f64>,
    /// Mask seeds `0..seeds`.
    pub seeds: u64,
    /// Fixed APL threshold; `None` picks [`default_epsilon`] per ratio.
    pub epsilon: Option<f64>,
    pub level: Level,
    pub provider: Provider,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lab: LabConfig::default(),
            lab_seed: 0,
            tasks: 2,
            ratios: vec![0.9, 0.99, 0.995],
            seeds: 5,
            epsilon: None,
            level: Level::Layer,
            provider: Provider::Causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub method: BenchMethod,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// `(task, fine-tuned accuracy, base accuracy)` on the test split.
    pub reference: Vec<(String, f64, f64)>,
    pub importance: Vec<ImportanceReport>,
}

impl BenchResult {
    pub fn mean_accuracy(&self, method: BenchMethod, ratio: f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.ratio == ratio)
            .map(|r| r.accuracy)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Mean over rows of `accuracy / fine-tuned accuracy of that task`.
    pub fn mean_retention(&self, method: BenchMethod, ratio: f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.ratio == ratio)
            .map(|r| {
                let fine = self.reference.iter().find(|t| t.0 == r.task).unwrap().1;
                r.accuracy / fine
            })
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["version", "task", "method", "ratio", "seed", "accuracy"])
            .map_err(fail)?;
        for r in &self.rows {
            w.write_record([
                CSV_VERSION.to_string(),
                r.task.clone(),
                r.method.as_str().to_string(),
                r.ratio.to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.accuracy),
            ])
            .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::atomic_write(path, &buf)
    }
}

pub fn pruning_comparison(cfg: &BenchConfig) -> Result<BenchResult> {
    for &r in &cfg.ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::invalid(format!("drop ratio {r} must lie in [0, 1)")));
        }
    }
    let lab = Lab::build(&cfg.lab, cfg.tasks, cfg.lab_seed)?;
    let (base32, fine32) = lab.checkpoints();
    let base64: TensorMap<f64> = base32.cast();
    let parts = build_partitions(&base32, &lab.spec.schema(cfg.level))?;

    let mut rows = Vec::new();
    let mut reference = Vec::new();
    let mut reports = Vec::new();
    for (k, task) in lab.tasks.iter().enumerate() {
        let fine = &fine32[k];
        let fine_acc = evaluate(&fine.cast(), &lab.spec, &task.test)?.accuracy;
        let base_acc = evaluate(&base64, &lab.spec, &task.test)?.accuracy;
        reference.push((task.id.clone(), fine_acc, base_acc));

        let delta = compute_delta(fine, &base32)?;
        let report = match cfg.provider {
            Provider::Causal => causal_importance(&ToyEvaluator, fine, &base32, &parts, &task.few_shot)?,
            Provider::Gradient => {
                let (_, g) = crate::toy::loss_and_grad(&base64, &lab.spec, &task.few_shot)?;
                gradient_importance(&delta, &g, &parts, &task.id)?
            }
        };

        for &ratio in &cfg.ratios {
            let eps = match cfg.epsilon {
                Some(e) => e,
                None => default_epsilon(ratio)
                    .ok_or_else(|| Error::invalid(format!("no threshold fits ratio {ratio}")))?,
            };
            let apl_ratios = linear_rank_drop_ratios(&report, ratio, eps)?;
            let magnitude = {
                let m = make_mask(&delta, &DropRatios::Global(ratio), &parts, DropMode::Magnitude, None)?;
                apply_mask(&delta, &m, Rescale::Off)?
            };
            let magnitude_acc = score(&base64, &magnitude, &lab, k)?;
            for seed in 0..cfg.seeds {
                let s = task_seed(seed, &task.id);
                for method in BenchMethod::ALL {
                    let accuracy = match method {
                        BenchMethod::Magnitude => magnitude_acc,
                        BenchMethod::Dare => {
                            let m = make_mask(&delta, &DropRatios::Global(ratio), &parts, DropMode::Random, Some(s))?;
                            score(&base64, &apply_mask(&delta, &m, Rescale::Nominal)?, &lab, k)?
                        }
                        BenchMethod::AplLinear => {
                            let m = make_mask(
                                &delta,
                                &DropRatios::PerPartition(apl_ratios.clone()),
                                &parts,
                                DropMode::Random,
                                Some(s),
                            )?;
                            score(&base64, &apply_mask(&delta, &m, Rescale::Nominal)?, &lab, k)?
                        }
                    };
                    rows.push(BenchRow {
                        task: task.id.clone(),
                        method,
                        ratio,
                        seed,
                        accuracy,
                    });
                }
            }
        }
        reports.push(report);
    }
    Ok(BenchResult {
        rows,
        reference,
        importance: reports,
    })
}

fn score(base: &TensorMap<f64>, delta: &TensorMap<f64>, lab: &Lab, task: usize) -> Result<f64> {
    let net = base.zip_map(delta, |b, d| b + d)?;
    Ok(evaluate(&net, &lab.spec, &lab.tasks[task].test)?.accuracy)
}
