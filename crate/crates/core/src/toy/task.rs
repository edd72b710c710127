// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic Gaussian-cluster classification tasks.
//!
//! All tasks from one [`make_tasks`] call share class means. A sample `u` is
//! drawn in `input_dim / 2` dimensions and embedded as `(cos a * u, sin a * u)`
//! for the task's angle `a`, so tasks 90 degrees apart live on disjoint
//! coordinates while close angles overlap. Labels may also be permuted.

use serde::{Deserialize, Serialize};

use crate::importance::FewShotBatch;
use crate::rng::{CounterRng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub input_dim: usize,
    pub class_count: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub few_shot_size: usize,
    /// Task `k` is rotated by `k * angle_step_deg` unless `angles_deg` is set.
    pub angle_step_deg: f64,
    #[serde(default)]
    pub angles_deg: Option<Vec<f64>>,
    pub permute_labels: bool,
}

impl Default for TaskTemplate {
    fn default() -> Self {
        Self {
            input_dim: 32,
            class_count: 4,
            separation: 3.0,
            noise: 1.0,
            train_size: 400,
            test_size: 400,
            few_shot_size: 32,
            angle_step_deg: 90.0,
            angles_deg: None,
            permute_labels: true,
        }
    }
}

impl TaskTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || !self.input_dim.is_multiple_of(2) || self.class_count < 2 {
            return Err(Error::invalid("tasks need an even input_dim >= 2 and class_count >= 2"));
        }
        if self.train_size == 0 || self.test_size == 0 || self.few_shot_size == 0 {
            return Err(Error::invalid("task splits must be nonempty"));
        }
        if !(self.noise >= 0.0 && self.separation > 0.0) {
            return Err(Error::invalid("noise must be >= 0 and separation > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub angle_deg: f64,
    /// `permutation[c]` is the label emitted for cluster `c`.
    pub permutation: Vec<usize>,
    pub train: FewShotBatch,
    pub test: FewShotBatch,
    pub few_shot: FewShotBatch,
}

impl SyntheticTask {
    /// Tasks are similar when their rotations differ by less than 45 degrees.
    pub fn is_similar_to(&self, other: &SyntheticTask) -> bool {
        let diff = (self.angle_deg - other.angle_deg).rem_euclid(360.0);
        diff.min(360.0 - diff) < 45.0
    }

    /// Mean input vector of the training split.
    pub fn train_mean(&self) -> Vec<f64> {
        let d = self.train.input_dim();
        let mut m = vec![0.0; d];
        for x in &self.train.inputs {
            for (a, v) in m.iter_mut().zip(x) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.train.len() as f64);
        m
    }
}

fn class_means(template: &TaskTemplate, rng: CounterRng) -> Vec<Vec<f64>> {
    let mut s = Stream::new(rng.stream("means"));
    (0..template.class_count)
        .map(|_| {
            let v: Vec<f64> = (0..template.input_dim / 2).map(|_| s.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * template.separation / norm).collect()
        })
        .collect()
}

fn embed(u: &[f64], angle_rad: f64) -> Vec<f64> {
    let (s, c) = angle_rad.sin_cos();
    u.iter().map(|v| c * v).chain(u.iter().map(|v| s * v)).collect()
}

fn sample_split(
    id: &str,
    n: usize,
    means: &[Vec<f64>],
    template: &TaskTemplate,
    angle_rad: f64,
    permutation: &[usize],
    rng: CounterRng,
) -> FewShotBatch {
    let mut s = Stream::new(rng);
    let classes = means.len();
    // cluster of example j is j mod C, then shuffled: counts differ by at most 1
    let mut clusters: Vec<usize> = (0..n).map(|j| j % classes).collect();
    s.shuffle(&mut clusters);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in clusters {
        let u: Vec<f64> = means[c].iter().map(|m| m + template.noise * s.normal()).collect();
        inputs.push(embed(&u, angle_rad));
        labels.push(permutation[c]);
    }
    FewShotBatch {
        task_id: id.to_string(),
        inputs,
        labels,
    }
}

/// Builds `count` tasks named `task{k}`; deterministic in `seed`.
pub fn make_tasks(count: usize, template: &TaskTemplate, seed: u64) -> Result<Vec<SyntheticTask>> {
    if count == 0 {
        return Err(Error::invalid("task count must be at least 1"));
    }
    template.validate()?;
    if let Some(a) = &template.angles_deg {
        if a.len() < count {
            return Err(Error::invalid(format!(
                "template lists {} angles for {count} tasks",
                a.len()
            )));
        }
    }
    let root = CounterRng::new(seed);
    let means = class_means(template, root);
    Ok((0..count)
        .map(|k| {
            let id = format!("task{k}");
            let trng = root.stream("task").substream(k as u64);
            let angle_deg = match &template.angles_deg {
                Some(a) => a[k],
                None => k as f64 * template.angle_step_deg,
            };
            let mut permutation: Vec<usize> = (0..template.class_count).collect();
            if template.permute_labels {
                Stream::new(trng.stream("labels")).shuffle(&mut permutation);
            }
            let rad = angle_deg.to_radians();
            let split = |name: &str, n| {
                sample_split(&id, n, &means, template, rad, &permutation, trng.stream(name))
            };
            SyntheticTask {
                train: split("train", template.train_size),
                test: split("test", template.test_size),
                few_shot: split("few_shot", template.few_shot_size),
                id,
                angle_deg,
                permutation,
            }
        })
        .collect())
}
