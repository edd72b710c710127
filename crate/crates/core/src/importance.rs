// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-partition parameter importance.
//!
//! Two providers produce the same [`ImportanceReport`]:
//!
//! - causal: score the fine-tuned model (clean run), then score it again with
//!   one partition swapped back to base values (corrupted run). The signed
//!   score is `P* - P`, negative when the partition matters.
//! - gradient: `s = -|delta . grad L(base)|` over the partition, a first-order
//!   stand-in for the causal score that needs one backward pass.
//!
//! Both share the sign convention "more negative means more important" so a
//! single calibration rule serves both; `magnitude` is the nonnegative size.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delta::{DeltaMap, DropMask};
use crate::partition::{substitute, Level, PartitionSet};
use crate::{Error, Result, TensorMap};

pub const REPORT_VERSION: u32 = 1;

/// Few-shot examples of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotBatch {
    pub task_id: String,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FewShotBatch {
    pub fn new(task_id: impl Into<String>, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let b = Self {
            task_id: task_id.into(),
            inputs,
            labels,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::invalid(format!("batch {:?} is empty", self.task_id)));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "batch {:?} has {} inputs but {} labels",
                self.task_id,
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let w = self.inputs[0].len();
        if self.inputs.iter().any(|x| x.len() != w) {
            return Err(Error::invalid(format!("batch {:?} has ragged inputs", self.task_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b: Self = crate::io::read_json(path)?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// SHA-256 over task id, labels and the exact input bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task_id.as_bytes());
        h.update([0u8]);
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            h.update((y as u64).to_le_bytes());
            for v in x {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same examples under a different task id.
    pub fn relabeled(&self, task_id: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            ..self.clone()
        }
    }
}

/// Mean true-label probability and mean loss over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub probability: f64,
    pub loss: f64,
}

/// A deterministic model scorer.
pub trait Evaluator: Send + Sync {
    fn class_count(&self, model: &TensorMap) -> Result<usize>;

    fn score(&self, model: &TensorMap, batch: &FewShotBatch) -> Result<Score>;

    /// Loss and its gradient with respect to every parameter of `model`.
    fn gradient(&self, _model: &TensorMap, _batch: &FewShotBatch) -> Result<(f64, TensorMap<f64>)> {
        Err(Error::Evaluator("this evaluator does not provide gradients".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Causal,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub id: String,
    /// Signed score; negative when the partition carries task information.
    pub score: f64,
    /// `max(-score, 0)`.
    pub magnitude: f64,
    #[serde(default)]
    pub elements: usize,
}

impl ImportanceEntry {
    pub fn new(id: impl Into<String>, score: f64, elements: usize) -> Self {
        Self {
            id: id.into(),
            score,
            magnitude: (-score).max(0.0),
            elements,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub version: u32,
    pub task_id: String,
    pub level: Level,
    pub provider: Provider,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_fingerprint: Option<String>,
    /// Clean-run probability, causal provider only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_probability: Option<f64>,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceReport {
    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = crate::io::read_json(path)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported report version {}", r.version),
            });
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn get(&self, id: &str) -> Option<&ImportanceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.magnitude).collect()
    }

    /// Sum of magnitudes; for a model-level report this is the model importance.
    pub fn total_magnitude(&self) -> f64 {
        self.entries.iter().map(|e| e.magnitude).sum()
    }
}

/// Clean run plus one corrupted run per partition.
///
/// Corrupted runs execute in parallel; entries follow partition order.
/// Residual partitions are not corrupted and score exactly 0.
pub fn causal_importance(
    evaluator: &dyn Evaluator,
    fine: &TensorMap,
    base: &TensorMap,
    partitions: &PartitionSet,
    batch: &FewShotBatch,
) -> Result<ImportanceReport> {
    batch.validate()?;
    fine.check_aligned(base)?;
    let clean = evaluator.score(fine, batch)?.probability;
    let entries = partitions
        .par_iter()
        .map(|p| {
            if p.residual {
                return Ok(ImportanceEntry::new(&p.id, 0.0, p.element_count));
            }
            let corrupted = substitute(fine, base, p)?;
            let pstar = evaluator.score(&corrupted, batch)?.probability;
            Ok(ImportanceEntry::new(&p.id, pstar - clean, p.element_count))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceReport {
        version: REPORT_VERSION,
        task_id: batch.task_id.clone(),
        level: partitions.level,
        provider: Provider::Causal,
        batch_fingerprint: Some(batch.fingerprint()),
        clean_probability: Some(clean),
        entries,
    })
}

/// Signed inner products `sum_{i in p} delta[i] * grad[i]`, one per partition.
pub fn partition_inner_products(
    delta: &DeltaMap,
    gradient: &TensorMap<f64>,
    partitions: &PartitionSet,
) -> Result<Vec<f64>> {
    delta.check_aligned(gradient)?;
    partitions
        .iter()
        .map(|p| {
            p.check_bounds(delta)?;
            let mut acc = 0.0;
            for m in &p.members {
                let d = delta.require(&m.tensor)?;
                let g = gradient.require(&m.tensor)?;
                for i in m.flat_indices(d.shape()) {
                    acc += d.data()[i] * g.data()[i];
                }
            }
            Ok(acc)
        })
        .collect()
}

/// `magnitude = |delta . grad|` per partition, `score = -magnitude`.
pub fn gradient_importance(
    delta: &DeltaMap,
    base_gradient: &TensorMap<f64>,
    partitions: &PartitionSet,
    task_id: &str,
) -> Result<ImportanceReport> {
    let inner = partition_inner_products(delta, base_gradient, partitions)?;
    let entries = partitions
        .iter()
        .zip(inner)
        .map(|(p, v)| {
            let s = if p.residual { 0.0 } else { -v.abs() };
            ImportanceEntry::new(&p.id, s, p.element_count)
        })
        .collect();
    Ok(ImportanceReport {
        version: REPORT_VERSION,
        task_id: task_id.to_string(),
        level: partitions.level,
        provider: Provider::Gradient,
        batch_fingerprint: None,
        clean_probability: None,
        entries,
    })
}

/// First-order prediction of `|L(fine) - L(pruned)|`: `|sum_i M[i] delta[i] grad[i]|`.
pub fn taylor_gap(delta: &DeltaMap, mask: &DropMask, base_gradient: &TensorMap<f64>) -> Result<f64> {
    delta.check_aligned(base_gradient)?;
    mask.check_aligned(delta)?;
    let mut acc = 0.0;
    for (name, d) in delta.iter() {
        let g = base_gradient.require(name)?;
        let m = mask.drops(name).unwrap();
        for ((&dv, &gv), &drop) in d.data().iter().zip(g.data()).zip(m) {
            if drop {
                acc += dv * gv;
            }
        }
    }
    Ok(acc.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{make_mask, DropMode, DropRatios};
    use crate::partition::{Member, Partition};
    use crate::DenseTensor;

    fn vecmap(name: &str, v: &[f64]) -> TensorMap<f64> {
        let mut m = TensorMap::new();
        m.insert(name, DenseTensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        m
    }

    fn slices(n: usize, cuts: &[(usize, usize)]) -> PartitionSet {
        PartitionSet {
            level: Level::Hidden,
            partitions: cuts
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| {
                    Partition::new(
                        format!("p{k}"),
                        vec![Member {
                            tensor: "w".into(),
                            ranges: vec![(a, b.min(n))],
                        }],
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn two_term_inner_product() {
        let d = vecmap("w", &[3.0, -1.0]);
        let g = vecmap("w", &[0.5, -0.25]);
        let r = gradient_importance(&d, &g, &slices(2, &[(0, 2)]), "t").unwrap();
        assert_eq!(r.entries[0].magnitude, 1.75);
        assert_eq!(r.entries[0].score, -1.75);
        assert_eq!(r.provider, Provider::Gradient);
    }

    #[test]
    fn orthogonal_slice_has_zero_importance() {
        let d = vecmap("w", &[1.0, 1.0, 2.0]);
        let g = vecmap("w", &[1.0, -1.0, 0.0]);
        let r = gradient_importance(&d, &g, &slices(3, &[(0, 2), (2, 3)]), "t").unwrap();
        assert_eq!(r.entries[0].magnitude, 0.0);
        assert_eq!(r.entries[1].magnitude, 0.0);
    }

    #[test]
    fn taylor_gap_trivial_cases() {
        let d = vecmap("w", &[1.0, 2.0, 3.0]);
        let g = vecmap("w", &[0.0, 1.0, 0.0]);
        let ps = PartitionSet::model(&d);
        let none = make_mask(&d, &DropRatios::Global(0.0), &ps, DropMode::Magnitude, None).unwrap();
        assert_eq!(taylor_gap(&d, &none, &g).unwrap(), 0.0);
        // drops indices 0 and 1 under magnitude at 2/3: only index 1 contributes
        let some = make_mask(&d, &DropRatios::Global(2.0 / 3.0), &ps, DropMode::Magnitude, None).unwrap();
        assert_eq!(taylor_gap(&d, &some, &g).unwrap(), 2.0);
        let g0 = vecmap("w", &[1.0, 0.0, 0.0]);
        let d0 = vecmap("w", &[0.0, 2.0, 3.0]);
        assert_eq!(taylor_gap(&d0, &some, &g0).unwrap(), 0.0);
    }

    #[test]
    fn batch_validation_and_fingerprint() {
        assert!(FewShotBatch::new("t", vec![], vec![]).is_err());
        assert!(FewShotBatch::new("t", vec![vec![1.0]], vec![0, 1]).is_err());
        let a = FewShotBatch::new("t", vec![vec![1.0, 2.0]], vec![0]).unwrap();
        let b = FewShotBatch::new("t", vec![vec![1.0, 2.0000001]], vec![0]).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn report_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let r = ImportanceReport {
            version: REPORT_VERSION,
            task_id: "t".into(),
            level: Level::Layer,
            provider: Provider::Causal,
            batch_fingerprint: Some("ab".into()),
            clean_probability: Some(0.75),
            entries: vec![ImportanceEntry::new("l1", -0.25, 10)],
        };
        r.save(&p).unwrap();
        assert_eq!(ImportanceReport::load(&p).unwrap(), r);
        let text = std::fs::read_to_string(&p).unwrap();
        for key in ["version", "task_id", "level", "provider", "entries", "score", "magnitude"] {
            assert!(text.contains(key), "{key}");
        }
    }
}
