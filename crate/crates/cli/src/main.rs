// SPDX-License-Identifier: MIT OR Apache-2.0

//! `apl`: delta extraction, importance tracing, pruning, merging and the toy
//! laboratory from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 I/O error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use apl_core::bench::{default_epsilon, pruning_comparison, BenchConfig, BenchMethod, RATIO_GRID};
use apl_core::calibration::{linear_rank_drop_ratios, tanh_drop_ratios, CalibrationConfig, DEFAULT_TAU};
use apl_core::checkpoint::{load_checkpoint, save_checkpoint};
use apl_core::delta::{apply_mask, compute_delta, make_mask, reconstruct, DropMode, DropRatios, Rescale};
use apl_core::importance::{causal_importance, gradient_importance, Evaluator, FewShotBatch, ImportanceReport, Provider};
use apl_core::merge::{run_recipe_file, EvaluatorRegistry, RunReport};
use apl_core::partition::{build_partitions, Level, PartitionSchema, PartitionSet};
use apl_core::toy::{make_tasks, Lab, LabConfig, TaskTemplate, ToyEvaluator, ToyNetSpec};
use apl_core::{Error, Stage, TensorMap};

#[derive(Parser)]
#[command(name = "apl", version, about = "Importance-guided delta pruning and checkpoint merging")]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write fine - base as a checkpoint.
    Delta {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        fine: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a fine-tuned checkpoint's delta and write base + pruned delta.
    Prune(PruneArgs),
    /// Causal importance: swap each partition back to base and rescore.
    Trace(ImportanceArgs),
    /// Gradient importance: |delta . grad L(base)| per partition.
    Grad(ImportanceArgs),
    /// Turn an importance report into per-partition drop ratios.
    Calibrate {
        #[arg(long)]
        importance: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau1: f64,
        #[arg(long, value_enum, default_value_t = Rule::Tanh)]
        rule: Rule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a merge recipe.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a toy lab: pretrained base, one fine-tune per task, few-shot
    /// batches and a starter merge recipe.
    ToyTrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Merging)]
        preset: Preset,
        /// Task rotations in degrees, comma separated.
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
    },
    /// Write synthetic task splits as JSON batches.
    ToyMakeTasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
    },
    /// Pruning comparison: Magnitude vs. Dare vs. APL-linear.
    Bench(BenchArgs),
    /// Summarize a bench CSV or a run report.
    Report {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LevelArg::Layer)]
    level: LevelArg,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    /// Few-shot batch (JSON).
    #[arg(long)]
    batch: PathBuf,
    #[command(flatten)]
    partition: PartitionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PruneMethod::Dare)]
    method: PruneMethod,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau1: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Importance report, with `--provider file`.
    #[arg(long)]
    importance: Option<PathBuf>,
    /// Few-shot batch, with `--provider causal` or `grad`.
    #[arg(long)]
    batch: Option<PathBuf>,
    #[command(flatten)]
    partition: PartitionArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    tasks: usize,
    #[arg(long, value_delimiter = ',', default_values_t = RATIO_GRID.to_vec())]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Fixed APL threshold; by default the largest grid value that fits each ratio.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = ProviderArg::Causal)]
    provider: ProviderArg,
    #[arg(long, value_enum, default_value_t = LevelArg::Layer)]
    level: LevelArg,
    /// Seed for the lab (tasks, init, training).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Model,
    Layer,
    Hidden,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Model => Level::Model,
            LevelArg::Layer => Level::Layer,
            LevelArg::Hidden => Level::Hidden,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ProviderArg {
    Causal,
    Grad,
    File,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PruneMethod {
    Dare,
    Magnitude,
    AplTanh,
    AplLinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Tanh,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Pruning,
    Merging,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn at<T>(stage: Stage, r: apl_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        Failure::Core(match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    })
}

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Delta { base, fine, out } => {
            let b = at(Stage::Load, load_checkpoint(&base))?;
            let f = at(Stage::Load, load_checkpoint(&fine))?;
            let d = at(Stage::Delta, compute_delta(&f, &b))?;
            at(Stage::Write, save_checkpoint(&d.cast(), &out))?;
            info!("wrote delta of {} tensors to {}", d.len(), out.display());
            Ok(())
        }
        Command::Prune(a) => prune(a),
        Command::Trace(a) => importance(a, Provider::Causal),
        Command::Grad(a) => importance(a, Provider::Gradient),
        Command::Calibrate {
            importance,
            ratio,
            epsilon,
            tau1,
            rule,
            out,
        } => {
            let cfg = at(Stage::Calibrate, CalibrationConfig::new(ratio, epsilon, tau1, DEFAULT_TAU))?;
            let report = at(Stage::Load, ImportanceReport::load(&importance))?;
            let ratios = at(
                Stage::Calibrate,
                match rule {
                    Rule::Tanh => tanh_drop_ratios(&report, &cfg),
                    Rule::Linear => linear_rank_drop_ratios(&report, ratio, epsilon),
                },
            )?;
            at(Stage::Write, apl_core::io::write_json(&out, &ratios))?;
            Ok(())
        }
        Command::Merge { recipe, out, report } => {
            let report = report.unwrap_or_else(|| sibling(&out, ".report.json"));
            let r = run_recipe_file(&recipe, &out, Some(&report), &EvaluatorRegistry::with_defaults())?;
            for (id, w) in &r.weights {
                info!("weight {id}: {w:.6}");
            }
            Ok(())
        }
        Command::ToyTrain {
            out,
            tasks,
            seed,
            preset,
            angles,
        } => toy_train(&out, tasks, seed, preset, angles),
        Command::ToyMakeTasks {
            out,
            count,
            seed,
            angles,
        } => {
            let template = TaskTemplate {
                angles_deg: angles,
                ..TaskTemplate::default()
            };
            let tasks = make_tasks(count, &template, seed)?;
            ensure_dir(&out)?;
            for t in &tasks {
                for (split, b) in [("train", &t.train), ("test", &t.test), ("few-shot", &t.few_shot)] {
                    at(Stage::Write, b.save(&out.join(format!("{}.{split}.json", t.id))))?;
                }
            }
            println!("wrote {count} tasks to {}", out.display());
            Ok(())
        }
        Command::Bench(a) => bench(a),
        Command::Report { csv, run } => {
            if csv.is_none() && run.is_none() {
                return usage("report needs --csv or --run");
            }
            if let Some(p) = csv {
                summarize_csv(&p)?;
            }
            if let Some(p) = run {
                let r = at(Stage::Load, RunReport::load(&p))?;
                summarize_run(&r);
            }
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|source| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn partitions(args: &PartitionArgs, base: &TensorMap) -> CliResult<PartitionSet> {
    let level: Level = args.level.into();
    let schema = match &args.schema {
        Some(p) => at(Stage::Load, PartitionSchema::load(p))?.with_level(level),
        None if level == Level::Model => PartitionSchema::model(),
        None => match ToyNetSpec::infer(base) {
            Ok(spec) => spec.schema(level),
            Err(_) => return usage("--schema is required unless the checkpoint is a toy net"),
        },
    };
    at(Stage::Partition, build_partitions(base, &schema))
}

fn compute_importance(
    provider: Provider,
    base: &TensorMap,
    fine: &TensorMap,
    parts: &PartitionSet,
    batch: &FewShotBatch,
) -> CliResult<ImportanceReport> {
    let r = match provider {
        Provider::Causal => causal_importance(&ToyEvaluator, fine, base, parts, batch),
        Provider::Gradient => compute_delta(fine, base).and_then(|d| {
            let (_, g) = ToyEvaluator.gradient(base, batch)?;
            gradient_importance(&d, &g, parts, &batch.task_id)
        }),
    };
    at(Stage::Importance, r)
}

fn importance(a: ImportanceArgs, provider: Provider) -> CliResult {
    let base = at(Stage::Load, load_checkpoint(&a.base))?;
    let fine = at(Stage::Load, load_checkpoint(&a.fine))?;
    let batch = at(Stage::Load, FewShotBatch::load(&a.batch))?;
    let parts = partitions(&a.partition, &base)?;
    let report = compute_importance(provider, &base, &fine, &parts, &batch)?;
    at(Stage::Write, report.save(&a.out))?;
    Ok(())
}

fn prune(a: PruneArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.ratio) {
        return usage(format!("--ratio {} must lie in [0, 1)", a.ratio));
    }
    let apl = matches!(a.method, PruneMethod::AplTanh | PruneMethod::AplLinear);
    let provider = match (apl, a.provider) {
        (true, None) => return usage("APL pruning needs --provider"),
        (true, Some(ProviderArg::File)) if a.importance.is_none() => {
            return usage("--provider file needs --importance")
        }
        (true, Some(ProviderArg::Causal | ProviderArg::Grad)) if a.batch.is_none() => {
            return usage("--provider causal/grad needs --batch")
        }
        (_, p) => p,
    };
    let base = at(Stage::Load, load_checkpoint(&a.base))?;
    let fine = at(Stage::Load, load_checkpoint(&a.fine))?;
    let delta = at(Stage::Delta, compute_delta(&fine, &base))?;
    let parts = partitions(&a.partition, &base)?;

    let (ratios, mode, rescale) = match a.method {
        PruneMethod::Dare => (DropRatios::Global(a.ratio), DropMode::Random, Rescale::Nominal),
        PruneMethod::Magnitude => (DropRatios::Global(a.ratio), DropMode::Magnitude, Rescale::Off),
        PruneMethod::AplTanh | PruneMethod::AplLinear => {
            let report = match provider {
                Some(ProviderArg::File) => at(Stage::Load, ImportanceReport::load(a.importance.as_ref().unwrap()))?,
                Some(p) => {
                    let batch = at(Stage::Load, FewShotBatch::load(a.batch.as_ref().unwrap()))?;
                    let kind = if p == ProviderArg::Causal {
                        Provider::Causal
                    } else {
                        Provider::Gradient
                    };
                    compute_importance(kind, &base, &fine, &parts, &batch)?
                }
                None => unreachable!(),
            };
            let per = at(
                Stage::Calibrate,
                if a.method == PruneMethod::AplTanh {
                    CalibrationConfig::new(a.ratio, a.epsilon, a.tau1, DEFAULT_TAU)
                        .and_then(|cfg| tanh_drop_ratios(&report, &cfg))
                } else {
                    linear_rank_drop_ratios(&report, a.ratio, a.epsilon)
                },
            )?;
            (DropRatios::PerPartition(per), DropMode::Random, Rescale::Nominal)
        }
    };
    let seed = (mode == DropMode::Random).then_some(a.seed);
    let mask = at(Stage::Prune, make_mask(&delta, &ratios, &parts, mode, seed))?;
    let pruned = at(Stage::Prune, apply_mask(&delta, &mask, rescale))?;
    let out = at(Stage::Prune, reconstruct(&base, &pruned))?;
    at(Stage::Write, save_checkpoint(&out, &a.out))?;
    info!(
        "dropped {} of {} delta parameters",
        mask.dropped_count(),
        delta.total_elements()
    );
    Ok(())
}

fn toy_train(out: &Path, tasks: usize, seed: u64, preset: Preset, angles: Option<Vec<f64>>) -> CliResult {
    let mut cfg = match preset {
        Preset::Pruning => LabConfig::default(),
        Preset::Merging => LabConfig::merging(),
    };
    if angles.is_some() {
        cfg.template.angles_deg = angles;
    }
    let lab = Lab::build(&cfg, tasks, seed)?;
    ensure_dir(out)?;
    let (base, fine) = lab.checkpoints();
    at(Stage::Write, save_checkpoint(&base, &out.join("base.safetensors")))?;
    let mut recipe = String::from(
        "base = \"base.safetensors\"\nmethod = \"mi-task-arithmetic\"\npruner = \"apl-tanh\"\nprovider = \"causal\"\nratio = 0.9\n",
    );
    for (k, task) in lab.tasks.iter().enumerate() {
        at(Stage::Write, save_checkpoint(&fine[k], &out.join(format!("{}.safetensors", task.id))))?;
        for (split, b) in [("batch", &task.few_shot), ("test", &task.test)] {
            at(Stage::Write, b.save(&out.join(format!("{}.{split}.json", task.id))))?;
        }
        recipe += &format!(
            "\n[[tasks]]\nid = \"{0}\"\nfine = \"{0}.safetensors\"\nbatch = \"{0}.batch.json\"\n",
            task.id
        );
        let fine_acc = lab.test_accuracy(&lab.fine[k], k)?;
        let base_acc = lab.test_accuracy(&lab.base, k)?;
        println!(
            "{}: angle {:.1}, fine-tuned accuracy {fine_acc:.4}, base {base_acc:.4}",
            task.id, task.angle_deg
        );
    }
    at(Stage::Write, apl_core::io::atomic_write(&out.join("recipe.toml"), recipe.as_bytes()))?;
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    if a.tasks == 0 || a.seeds == 0 || a.ratios.is_empty() {
        return usage("--tasks, --seeds and --ratios must be nonempty");
    }
    if a.epsilon.is_none() {
        if let Some(r) = a.ratios.iter().find(|&&r| default_epsilon(r).is_none()) {
            return usage(format!("no default epsilon fits ratio {r}; pass --epsilon"));
        }
    }
    let provider = match a.provider {
        ProviderArg::Causal => Provider::Causal,
        ProviderArg::Grad => Provider::Gradient,
        ProviderArg::File => return usage("bench computes importance itself; use causal or grad"),
    };
    let cfg = BenchConfig {
        lab: LabConfig::default(),
        lab_seed: a.seed,
        tasks: a.tasks,
        ratios: a.ratios.clone(),
        seeds: a.seeds,
        epsilon: a.epsilon,
        level: a.level.into(),
        provider,
    };
    let result = pruning_comparison(&cfg)?;
    if let Some(p) = &a.csv {
        at(Stage::Write, result.save_csv(p))?;
    }
    for (task, fine, base) in &result.reference {
        println!("{task}: fine-tuned {fine:.4}, base {base:.4}");
    }
    println!("{:>8} {:>12} {:>12} {:>12}", "ratio", "magnitude", "dare", "apl-linear");
    for &r in &a.ratios {
        let cell = |m| result.mean_accuracy(m, r).unwrap_or(f64::NAN);
        println!(
            "{r:>8} {:>12.4} {:>12.4} {:>12.4}",
            cell(BenchMethod::Magnitude),
            cell(BenchMethod::Dare),
            cell(BenchMethod::AplLinear)
        );
    }
    Ok(())
}

fn summarize_csv(path: &Path) -> CliResult {
    let bytes = at(Stage::Load, apl_core::io::read_bytes(path))?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let bad = |m: String| {
        Failure::Core(Error::Parse {
            path: path.to_path_buf(),
            message: m,
        })
    };
    let headers = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name:?}")))
    };
    let (ci, cm, cr, ca) = (col("version")?, col("method")?, col("ratio")?, col("accuracy")?);
    // (ratio text, method) -> (sum, count), keyed to keep the input's ratio order
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec[ci] != apl_core::bench::CSV_VERSION.to_string() {
            return Err(bad(format!("unsupported csv version {}", &rec[ci])));
        }
        let acc: f64 = rec[ca].parse().map_err(|_| bad(format!("bad accuracy {:?}", &rec[ca])))?;
        if !order.iter().any(|r| r == &rec[cr]) {
            order.push(rec[cr].to_string());
        }
        let e = cells.entry((rec[cr].to_string(), rec[cm].to_string())).or_default();
        e.0 += acc;
        e.1 += 1;
    }
    println!("{:>8} {:>12} {:>12} {:>12}", "ratio", "magnitude", "dare", "apl-linear");
    for r in &order {
        let cell = |m: BenchMethod| {
            cells
                .get(&(r.clone(), m.as_str().to_string()))
                .map_or(f64::NAN, |(s, n)| s / *n as f64)
        };
        println!(
            "{r:>8} {:>12.4} {:>12.4} {:>12.4}",
            cell(BenchMethod::Magnitude),
            cell(BenchMethod::Dare),
            cell(BenchMethod::AplLinear)
        );
    }
    Ok(())
}

fn summarize_run(r: &RunReport) {
    println!(
        "method {:?}, pruner {:?}, level {:?}, ratio {}, seed {}{}",
        r.method,
        r.pruner,
        r.level,
        r.ratio,
        r.seed,
        if r.out_of_domain { ", out-of-domain" } else { "" }
    );
    for t in &r.tasks {
        println!(
            "{}: dropped {} of {} ({:.4}), weight {:.6}",
            t.task_id, t.dropped, t.total, t.realized_drop_fraction, t.weight
        );
    }
}
