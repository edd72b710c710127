// SPDX-License-Identifier: MIT OR Apache-2.0

//! Merging pruned task vectors, and the recipe-driven pipeline that produces
//! them.
//!
//! A run goes: load checkpoints, compute deltas, resolve partitions, estimate
//! importance per task (from each task's batch, or from one shared
//! out-of-domain batch), calibrate drop ratios, sample masks, prune and
//! rescale, then merge with either a fixed scale (Task Arithmetic) or softmax
//! weights of model-level importance (MI Task Arithmetic).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{linear_rank_drop_ratios, merge_weights, tanh_drop_ratios, CalibrationConfig, DEFAULT_TAU};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::delta::{apply_mask, compute_delta, make_mask, DeltaMap, DropMode, DropRatios, Rescale};
use crate::error::StageExt;
use crate::importance::{
    causal_importance, gradient_importance, Evaluator, FewShotBatch, ImportanceReport,
};
use crate::partition::{build_partitions, Level, PartitionSchema, PartitionSet};
use crate::rng::{fnv1a, mix64};
use crate::toy::{ToyEvaluator, ToyNetSpec};
use crate::{DenseTensor, Error, Result, Stage, TensorMap};

pub const RUN_REPORT_VERSION: u32 = 1;

#[derive(Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn check_deltas(base: &TensorMap, deltas: &[&DeltaMap]) -> Result<()> {
    deltas.iter().try_for_each(|d| base.check_aligned(*d))
}

/// `sum_t w_t * (base + delta_t)`, accumulated in task order with
/// compensated summation.
pub fn merge(
    base: &TensorMap,
    pruned_deltas: &[(String, DeltaMap)],
    weights: &BTreeMap<String, f64>,
) -> Result<TensorMap> {
    let refs: Vec<&DeltaMap> = pruned_deltas.iter().map(|(_, d)| d).collect();
    check_deltas(base, &refs)?;
    let mut w = Vec::with_capacity(pruned_deltas.len());
    for (id, _) in pruned_deltas {
        w.push(
            *weights
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no merge weight for task {id:?}")))?,
        );
    }
    if let Some(extra) = weights.keys().find(|k| !pruned_deltas.iter().any(|(id, _)| id == *k)) {
        return Err(Error::invalid(format!("merge weight given for unknown task {extra:?}")));
    }
    Ok(combine(base, &refs, |b, k, d| w[k] * (b + d)))
}

/// `base + scale * sum_t delta_t`.
pub fn task_arithmetic(base: &TensorMap, pruned_deltas: &[DeltaMap], scale: f64) -> Result<TensorMap> {
    let refs: Vec<&DeltaMap> = pruned_deltas.iter().collect();
    check_deltas(base, &refs)?;
    Ok(base
        .iter()
        .map(|(name, b)| {
            let data = (0..b.len())
                .map(|i| {
                    let mut acc = Kahan::default();
                    acc.add(b.data()[i] as f64);
                    for d in &refs {
                        acc.add(scale * d.get(name).unwrap().data()[i]);
                    }
                    acc.sum as f32
                })
                .collect();
            (name.to_string(), DenseTensor::new(b.shape().to_vec(), data).unwrap())
        })
        .collect())
}

fn combine(base: &TensorMap, deltas: &[&DeltaMap], term: impl Fn(f64, usize, f64) -> f64) -> TensorMap {
    base.iter()
        .map(|(name, b)| {
            let data = (0..b.len())
                .map(|i| {
                    let bv = b.data()[i] as f64;
                    let mut acc = Kahan::default();
                    for (k, d) in deltas.iter().enumerate() {
                        acc.add(term(bv, k, d.get(name).unwrap().data()[i]));
                    }
                    acc.sum as f32
                })
                .collect();
            (name.to_string(), DenseTensor::new(b.shape().to_vec(), data).unwrap())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TaskArithmetic,
    MiTaskArithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pruner {
    #[default]
    None,
    Dare,
    Magnitude,
    AplTanh,
    AplLinear,
}

impl Pruner {
    pub fn is_apl(self) -> bool {
        matches!(self, Pruner::AplTanh | Pruner::AplLinear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Causal,
    Gradient,
    File,
}

/// Divisor applied to APL survivors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescaleBasis {
    /// Each partition's calibrated ratio.
    #[default]
    Nominal,
    /// The base ratio for every partition.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    pub fine: PathBuf,
    /// Few-shot batch for in-domain importance.
    #[serde(default)]
    pub batch: Option<PathBuf>,
    /// Partition-level importance report, for `provider = "file"`.
    #[serde(default)]
    pub importance: Option<PathBuf>,
    /// Model-level importance report, for `provider = "file"` with MI weights.
    #[serde(default)]
    pub model_importance: Option<PathBuf>,
    /// Precomputed gradient at the base checkpoint, for `provider = "gradient"`.
    #[serde(default)]
    pub gradient: Option<PathBuf>,
}

fn default_evaluator() -> String {
    "toy".into()
}
fn default_ratio() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_scale() -> f64 {
    1.0
}
fn default_level() -> Level {
    Level::Layer
}

/// One merging run. Relative paths resolve against the recipe's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub base: PathBuf,
    pub tasks: Vec<TaskEntry>,
    pub method: Method,
    #[serde(default)]
    pub pruner: Pruner,
    #[serde(default)]
    pub provider: Option<ProviderKind>,
    #[serde(default = "default_evaluator")]
    pub evaluator: String,
    #[serde(default = "default_level")]
    pub level: Level,
    /// Partition schema; toy nets fall back to one group per layer.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_tau")]
    pub tau1: f64,
    #[serde(default = "default_tau")]
    pub tau2: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rescale: RescaleBasis,
    /// One batch from an unseen task, used for every task's importance.
    #[serde(default)]
    pub ood_batch: Option<PathBuf>,
}

impl Recipe {
    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = crate::io::read_toml(path)?;
        r.validate()?;
        Ok(r)
    }

    fn needs_partition_importance(&self) -> bool {
        self.pruner.is_apl()
    }

    fn needs_model_importance(&self) -> bool {
        self.method == Method::MiTaskArithmetic
    }

    fn needs_importance(&self) -> bool {
        self.needs_partition_importance() || self.needs_model_importance()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("recipe lists no tasks"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(Error::invalid(format!("task id {:?} appears twice", t.id)));
            }
        }
        if self.pruner.is_apl() {
            CalibrationConfig::new(self.ratio, self.epsilon, self.tau1, self.tau2)?;
        } else if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("drop ratio {} must lie in [0, 1)", self.ratio)));
        }
        if !(self.tau2 > 0.0) {
            return Err(Error::invalid("tau2 must be positive"));
        }
        if !self.scale.is_finite() {
            return Err(Error::invalid("scale must be finite"));
        }
        if self.needs_importance() {
            let provider = self.provider.ok_or_else(|| {
                Error::invalid("this pruner/method needs an importance provider")
            })?;
            match provider {
                ProviderKind::File => {
                    for t in &self.tasks {
                        if self.needs_partition_importance() && t.importance.is_none() {
                            return Err(Error::invalid(format!("task {:?} lacks an importance file", t.id)));
                        }
                        if self.needs_model_importance() && t.model_importance.is_none() {
                            return Err(Error::invalid(format!(
                                "task {:?} lacks a model_importance file",
                                t.id
                            )));
                        }
                    }
                }
                ProviderKind::Causal | ProviderKind::Gradient => {
                    if self.ood_batch.is_some() {
                        if let Some(t) = self.tasks.iter().find(|t| t.batch.is_some()) {
                            return Err(Error::invalid(format!(
                                "ood_batch excludes per-task batches, but task {:?} has one",
                                t.id
                            )));
                        }
                    } else if let Some(t) = self.tasks.iter().find(|t| {
                        t.batch.is_none() && !(provider == ProviderKind::Gradient && t.gradient.is_some())
                    }) {
                        return Err(Error::invalid(format!("task {:?} has no few-shot batch", t.id)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named evaluators available to recipes.
pub struct EvaluatorRegistry {
    entries: BTreeMap<String, Box<dyn Evaluator>>,
}

impl EvaluatorRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding the toy-net evaluator under `"toy"`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("toy", Box::new(ToyEvaluator));
        r
    }

    pub fn register(&mut self, name: &str, evaluator: Box<dyn Evaluator>) {
        self.entries.insert(name.to_string(), evaluator);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Evaluator> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Evaluator(format!("no evaluator named {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<ImportanceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_importance: Option<ImportanceReport>,
    /// Nominal drop ratio per partition.
    pub ratios: BTreeMap<String, f64>,
    pub dropped: usize,
    pub total: usize,
    pub realized_drop_fraction: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub method: Method,
    pub pruner: Pruner,
    pub provider: Option<ProviderKind>,
    pub level: Level,
    pub seed: u64,
    pub ratio: f64,
    pub epsilon: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub scale: f64,
    pub out_of_domain: bool,
    pub tasks: Vec<TaskRun>,
    pub weights: BTreeMap<String, f64>,
    /// Wall-clock milliseconds per stage. The only nondeterministic field.
    #[serde(default)]
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunReport {
    /// The report with timings cleared, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings_ms: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

struct Timer {
    at: Instant,
    out: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Self {
            at: Instant::now(),
            out: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        *self.out.entry(stage.to_string()).or_default() +=
            (now - self.at).as_secs_f64() * 1e3;
        self.at = now;
    }
}

/// Mask seed for one task, so tasks sharing a recipe seed get distinct masks.
pub fn task_seed(seed: u64, task_id: &str) -> u64 {
    mix64(seed ^ fnv1a(task_id.as_bytes()))
}

struct Loaded {
    base: TensorMap,
    fine: Vec<TensorMap>,
    batches: Vec<Option<FewShotBatch>>,
    gradients: Vec<Option<TensorMap<f64>>>,
    files: Vec<(Option<ImportanceReport>, Option<ImportanceReport>)>,
    schema: Option<PartitionSchema>,
}

fn load_inputs(recipe: &Recipe, dir: &Path) -> Result<Loaded> {
    let at = |p: &Path| dir.join(p);
    let base = load_checkpoint(&at(&recipe.base))?;
    let fine = recipe
        .tasks
        .iter()
        .map(|t| load_checkpoint(&at(&t.fine)))
        .collect::<Result<Vec<_>>>()?;
    let provider = if recipe.needs_importance() { recipe.provider } else { None };
    let in_batch_mode = matches!(provider, Some(ProviderKind::Causal | ProviderKind::Gradient));
    let ood = match (&recipe.ood_batch, in_batch_mode) {
        (Some(p), true) => Some(FewShotBatch::load(&at(p))?),
        _ => None,
    };
    let batches = recipe
        .tasks
        .iter()
        .map(|t| match (&ood, &t.batch, in_batch_mode) {
            (_, _, false) => Ok(None),
            (Some(b), _, _) => Ok(Some(b.clone())),
            (None, Some(p), _) => FewShotBatch::load(&at(p)).map(Some),
            (None, None, _) => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let gradients = recipe
        .tasks
        .iter()
        .map(|t| match (&t.gradient, provider) {
            (Some(p), Some(ProviderKind::Gradient)) if ood.is_none() => {
                load_checkpoint(&at(p)).map(|g| Some(g.cast()))
            }
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let files = recipe
        .tasks
        .iter()
        .map(|t| {
            if provider != Some(ProviderKind::File) {
                return Ok((None, None));
            }
            let part = match (&t.importance, recipe.needs_partition_importance()) {
                (Some(p), true) => Some(ImportanceReport::load(&at(p))?),
                _ => None,
            };
            let model = match (&t.model_importance, recipe.needs_model_importance()) {
                (Some(p), true) => Some(ImportanceReport::load(&at(p))?),
                _ => None,
            };
            Ok((part, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let schema = match &recipe.schema {
        Some(p) => Some(PartitionSchema::load(&at(p))?),
        None => None,
    };
    Ok(Loaded {
        base,
        fine,
        batches,
        gradients,
        files,
        schema,
    })
}

fn resolve_schema(recipe: &Recipe, loaded: &Loaded) -> Result<PartitionSchema> {
    match &loaded.schema {
        Some(s) => Ok(s.with_level(recipe.level)),
        None if recipe.level == Level::Model => Ok(PartitionSchema::model()),
        None => ToyNetSpec::infer(&loaded.base)
            .map(|spec| spec.schema(recipe.level))
            .map_err(|_| Error::Schema("recipe has no schema and the base is not a toy net".into())),
    }
}

fn check_report_matches(report: &ImportanceReport, parts: &PartitionSet) -> Result<()> {
    let ids: Vec<&str> = report.entries.iter().map(|e| e.id.as_str()).collect();
    let want: Vec<&str> = parts.ids().collect();
    if ids != want {
        return Err(Error::invalid(format!(
            "importance report for {:?} covers {ids:?}, expected {want:?}",
            report.task_id
        )));
    }
    Ok(())
}

/// Runs a recipe in memory. Paths in the recipe resolve against `dir`.
pub fn run_recipe(
    recipe: &Recipe,
    dir: &Path,
    registry: &EvaluatorRegistry,
) -> Result<(TensorMap, RunReport)> {
    recipe.validate().stage(Stage::Load)?;
    let mut timer = Timer::new();
    let loaded = load_inputs(recipe, dir).stage(Stage::Load)?;
    timer.lap(Stage::Load);

    let deltas = loaded
        .fine
        .iter()
        .map(|f| compute_delta(f, &loaded.base))
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Delta)?;
    timer.lap(Stage::Delta);

    let parts = resolve_schema(recipe, &loaded)
        .and_then(|s| build_partitions(&loaded.base, &s))
        .stage(Stage::Partition)?;
    let model_parts = PartitionSet::model(&loaded.base);
    timer.lap(Stage::Partition);

    let provider = if recipe.needs_importance() { recipe.provider } else { None };
    let mut part_reports: Vec<Option<ImportanceReport>> = vec![None; recipe.tasks.len()];
    let mut model_reports: Vec<Option<ImportanceReport>> = vec![None; recipe.tasks.len()];
    if let Some(kind) = provider {
        let evaluator = match kind {
            ProviderKind::File => None,
            _ => Some(registry.get(&recipe.evaluator).stage(Stage::Importance)?),
        };
        // Gradients depend only on (base, batch): compute once per distinct batch.
        let mut grad_cache: BTreeMap<String, TensorMap<f64>> = BTreeMap::new();
        for (k, task) in recipe.tasks.iter().enumerate() {
            let (part, model) = match kind {
                ProviderKind::File => {
                    let (p, m) = loaded.files[k].clone();
                    if let Some(p) = &p {
                        check_report_matches(p, &parts).stage(Stage::Importance)?;
                    }
                    if let Some(m) = &m {
                        if m.level != Level::Model {
                            return Err(Error::invalid(format!(
                                "model_importance for {:?} is a {} report",
                                task.id, m.level
                            )))
                            .stage(Stage::Importance);
                        }
                    }
                    (p, m)
                }
                ProviderKind::Causal => {
                    let ev = evaluator.unwrap();
                    let batch = loaded.batches[k].as_ref().unwrap();
                    let run = |ps: &PartitionSet| {
                        causal_importance(ev, &loaded.fine[k], &loaded.base, ps, batch).map(|mut r| {
                            r.task_id = task.id.clone();
                            r
                        })
                    };
                    let p = if recipe.needs_partition_importance() {
                        Some(run(&parts).stage(Stage::Importance)?)
                    } else {
                        None
                    };
                    let m = if recipe.needs_model_importance() {
                        Some(run(&model_parts).stage(Stage::Importance)?)
                    } else {
                        None
                    };
                    (p, m)
                }
                ProviderKind::Gradient => {
                    let grad = match (&loaded.gradients[k], &loaded.batches[k]) {
                        (Some(g), _) => g.clone(),
                        (None, Some(batch)) => {
                            let key = batch.fingerprint();
                            if !grad_cache.contains_key(&key) {
                                let ev = evaluator.unwrap();
                                let (_, g) = ev.gradient(&loaded.base, batch).stage(Stage::Importance)?;
                                grad_cache.insert(key.clone(), g);
                            }
                            grad_cache[&key].clone()
                        }
                        (None, None) => unreachable!("validated"),
                    };
                    let fingerprint = loaded.batches[k].as_ref().map(FewShotBatch::fingerprint);
                    let run = |ps: &PartitionSet| {
                        gradient_importance(&deltas[k], &grad, ps, &task.id).map(|mut r| {
                            r.batch_fingerprint = fingerprint.clone();
                            r
                        })
                    };
                    let p = if recipe.needs_partition_importance() {
                        Some(run(&parts).stage(Stage::Importance)?)
                    } else {
                        None
                    };
                    let m = if recipe.needs_model_importance() {
                        Some(run(&model_parts).stage(Stage::Importance)?)
                    } else {
                        None
                    };
                    (p, m)
                }
            };
            part_reports[k] = part;
            model_reports[k] = model;
        }
    }
    timer.lap(Stage::Importance);

    let ratios: Vec<Option<BTreeMap<String, f64>>> = part_reports
        .iter()
        .map(|r| match (recipe.pruner, r) {
            (Pruner::AplTanh, Some(r)) => {
                let cfg = CalibrationConfig::new(recipe.ratio, recipe.epsilon, recipe.tau1, recipe.tau2)?;
                tanh_drop_ratios(r, &cfg).map(Some)
            }
            (Pruner::AplLinear, Some(r)) => linear_rank_drop_ratios(r, recipe.ratio, recipe.epsilon).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()
        .stage(Stage::Calibrate)?;
    let weights: BTreeMap<String, f64> = match recipe.method {
        Method::MiTaskArithmetic => {
            let mags: Vec<(String, f64)> = recipe
                .tasks
                .iter()
                .zip(&model_reports)
                .map(|(t, r)| (t.id.clone(), r.as_ref().map_or(0.0, ImportanceReport::total_magnitude)))
                .collect();
            merge_weights(&mags, recipe.tau2).stage(Stage::Calibrate)?
        }
        Method::TaskArithmetic => recipe.tasks.iter().map(|t| (t.id.clone(), 1.0)).collect(),
    };
    timer.lap(Stage::Calibrate);

    let mut pruned = Vec::with_capacity(deltas.len());
    let mut runs = Vec::with_capacity(deltas.len());
    for (k, task) in recipe.tasks.iter().enumerate() {
        let delta = &deltas[k];
        let seed = task_seed(recipe.seed, &task.id);
        let (mask, rescale, mask_seed) = match recipe.pruner {
            Pruner::None => (None, Rescale::Off, None),
            Pruner::Dare => (
                Some(make_mask(delta, &DropRatios::Global(recipe.ratio), &parts, DropMode::Random, Some(seed))),
                Rescale::Nominal,
                Some(seed),
            ),
            Pruner::Magnitude => (
                Some(make_mask(delta, &DropRatios::Global(recipe.ratio), &parts, DropMode::Magnitude, None)),
                Rescale::Off,
                None,
            ),
            Pruner::AplTanh | Pruner::AplLinear => {
                let r = ratios[k].clone().expect("calibrated above");
                let rescale = match recipe.rescale {
                    RescaleBasis::Nominal => Rescale::Nominal,
                    RescaleBasis::Global => Rescale::Global(recipe.ratio),
                };
                (
                    Some(make_mask(delta, &DropRatios::PerPartition(r), &parts, DropMode::Random, Some(seed))),
                    rescale,
                    Some(seed),
                )
            }
        };
        let (out, dropped, nominal) = match mask {
            None => (delta.clone(), 0, BTreeMap::new()),
            Some(mask) => {
                let mask = mask.stage(Stage::Prune)?;
                let out = apply_mask(delta, &mask, rescale).stage(Stage::Prune)?;
                (out, mask.dropped_count(), mask.nominal_ratios().clone())
            }
        };
        let total = delta.total_elements();
        runs.push(TaskRun {
            task_id: task.id.clone(),
            mask_seed,
            importance: part_reports[k].take(),
            model_importance: model_reports[k].take(),
            ratios: nominal,
            dropped,
            total,
            realized_drop_fraction: if total == 0 { 0.0 } else { dropped as f64 / total as f64 },
            weight: weights[&task.id],
        });
        pruned.push((task.id.clone(), out));
    }
    timer.lap(Stage::Prune);

    let merged = match recipe.method {
        Method::TaskArithmetic => {
            let ds: Vec<DeltaMap> = pruned.into_iter().map(|(_, d)| d).collect();
            task_arithmetic(&loaded.base, &ds, recipe.scale)
        }
        Method::MiTaskArithmetic => {
            let scaled: Vec<(String, DeltaMap)> = if recipe.scale == 1.0 {
                pruned
            } else {
                pruned
                    .into_iter()
                    .map(|(id, d)| (id, d.map(|v| v * recipe.scale)))
                    .collect()
            };
            merge(&loaded.base, &scaled, &weights)
        }
    }
    .stage(Stage::Merge)?;
    timer.lap(Stage::Merge);

    let report = RunReport {
        version: RUN_REPORT_VERSION,
        method: recipe.method,
        pruner: recipe.pruner,
        provider,
        level: parts.level,
        seed: recipe.seed,
        ratio: recipe.ratio,
        epsilon: recipe.epsilon,
        tau1: recipe.tau1,
        tau2: recipe.tau2,
        scale: recipe.scale,
        out_of_domain: recipe.ood_batch.is_some() && provider.is_some(),
        tasks: runs,
        weights,
        timings_ms: timer.out,
    };
    Ok((merged, report))
}

/// Loads a recipe file, runs it, and writes the merged checkpoint and the
/// run report. Nothing is written unless every stage succeeds.
pub fn run_recipe_file(
    recipe_path: &Path,
    out: &Path,
    report_path: Option<&Path>,
    registry: &EvaluatorRegistry,
) -> Result<RunReport> {
    let recipe = Recipe::load(recipe_path).stage(Stage::Load)?;
    let dir = recipe_path.parent().unwrap_or_else(|| Path::new("."));
    let (merged, report) = run_recipe(&recipe, dir, registry)?;
    save_checkpoint(&merged, out).stage(Stage::Write)?;
    if let Some(p) = report_path {
        report.save(p).stage(Stage::Write)?;
    }
    Ok(report)
}
