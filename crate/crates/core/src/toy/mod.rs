// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale laboratory: tanh MLPs, synthetic tasks, training and an
//! evaluator that plugs into the importance providers.

mod net;
mod task;

pub use net::{
    bias_name, evaluate, finite_diff, finite_diff_grad, forward, loss, loss_and_grad, softmax, train,
    weight_name, Evaluation, ToyNetSpec, TrainConfig,
};
pub use task::{make_tasks, SyntheticTask, TaskTemplate};

use serde::{Deserialize, Serialize};

use crate::importance::{Evaluator, FewShotBatch, Score};
use crate::{Error, Result, TensorMap};

/// Scores `f32` checkpoints of toy nets; the architecture is read from the
/// tensor shapes and all arithmetic is `f64`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEvaluator;

impl Evaluator for ToyEvaluator {
    fn class_count(&self, model: &TensorMap) -> Result<usize> {
        Ok(ToyNetSpec::infer(model)?.class_count)
    }

    fn score(&self, model: &TensorMap, batch: &FewShotBatch) -> Result<Score> {
        let spec = ToyNetSpec::infer(model)?;
        let e = evaluate(&model.cast(), &spec, batch)?;
        Ok(Score {
            probability: e.probability,
            loss: e.loss,
        })
    }

    fn gradient(&self, model: &TensorMap, batch: &FewShotBatch) -> Result<(f64, TensorMap<f64>)> {
        let spec = ToyNetSpec::infer(model)?;
        loss_and_grad(&model.cast(), &spec, batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub hidden_dims: Vec<usize>,
    pub template: TaskTemplate,
    /// Rotations mixed into the pretraining set that produces the base model.
    pub pretrain_angles_deg: Vec<f64>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for LabConfig {
    /// Wide nets and per-task label permutations: the base is poor on every
    /// task, so each task lives in its delta. Used by the pruning comparison.
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 256],
            template: TaskTemplate::default(),
            pretrain_angles_deg: vec![45.0],
            pretrain: TrainConfig {
                epochs: 30,
                step_size: 0.2,
                frozen_layers: vec![],
            },
            finetune: TrainConfig {
                epochs: 200,
                step_size: 0.1,
                frozen_layers: vec![],
            },
        }
    }
}

impl LabConfig {
    /// Briefly pretrained base shared by all tasks, no label permutations,
    /// head frozen while fine-tuning. Used for two-task merges.
    pub fn merging() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            template: TaskTemplate {
                permute_labels: false,
                ..TaskTemplate::default()
            },
            pretrain_angles_deg: vec![45.0],
            pretrain: TrainConfig {
                epochs: 5,
                step_size: 0.2,
                frozen_layers: vec![],
            },
            finetune: TrainConfig {
                epochs: 150,
                step_size: 0.2,
                frozen_layers: vec![3],
            },
        }
    }
}

/// A pretrained base net and one fine-tune per task.
#[derive(Debug, Clone)]
pub struct Lab {
    pub spec: ToyNetSpec,
    pub base: TensorMap<f64>,
    pub tasks: Vec<SyntheticTask>,
    pub fine: Vec<TensorMap<f64>>,
}

impl Lab {
    pub fn build(cfg: &LabConfig, task_count: usize, seed: u64) -> Result<Self> {
        let t = &cfg.template;
        let spec = ToyNetSpec::new(t.input_dim, cfg.hidden_dims.clone(), t.class_count, seed)?;
        if cfg.pretrain_angles_deg.is_empty() {
            return Err(Error::invalid("lab needs at least one pretraining angle"));
        }
        let mut angles: Vec<f64> = match &t.angles_deg {
            Some(a) => a.iter().take(task_count).copied().collect(),
            None => (0..task_count).map(|k| k as f64 * t.angle_step_deg).collect(),
        };
        angles.extend(&cfg.pretrain_angles_deg);
        let template = TaskTemplate {
            angles_deg: Some(angles),
            ..t.clone()
        };
        let mut tasks = make_tasks(task_count + cfg.pretrain_angles_deg.len(), &template, seed)?;
        let pre = tasks.split_off(task_count);
        let mut mixture = FewShotBatch {
            task_id: "pretrain".into(),
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for p in pre {
            mixture.inputs.extend(p.train.inputs);
            mixture.labels.extend(p.train.labels);
        }
        let pretrain_task = mixture;
        let base = train(&spec.init(), &spec, &pretrain_task, &cfg.pretrain)?;
        let fine = tasks
            .iter()
            .map(|task| train(&base, &spec, &task.train, &cfg.finetune))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            base,
            tasks,
            fine,
        })
    }

    /// Checkpoint (`f32`) forms of the base and fine-tuned nets.
    pub fn checkpoints(&self) -> (TensorMap, Vec<TensorMap>) {
        (self.base.cast(), self.fine.iter().map(|f| f.cast()).collect())
    }

    pub fn test_accuracy(&self, net: &TensorMap<f64>, task: usize) -> Result<f64> {
        Ok(evaluate(net, &self.spec, &self.tasks[task].test)?.accuracy)
    }
}
