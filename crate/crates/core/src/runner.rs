//! End-to-end runs driven by a [`RunConfig`]: building the task and host
//! model, training, evaluating from checkpoints, merging, sweeping and
//! tracing.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::adapters::{Mode, TRANSFORMER_TARGETS};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experiments::{
    run_cell, run_sweep, subspace_trace, BlockTask, ClassificationTask, RecoveryTask,
    SubspaceTrace, SubspaceView, SweepCell, SweepRow,
};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{RunConfig, TaskKind};
use crate::io::csv;
use crate::nets::{
    attach_adapters, AdaptedLinear, LinearProbe, MlpClassifier, Model, Pass, TinyTransformerBlock,
};
use crate::rng;
use crate::training::{
    evaluate, train_loop, Batch, Dataset, EvalMetrics, StepObserver, StepView, TrainReport,
};

pub const CREATED_BY: &str = concat!("droplora ", env!("CARGO_PKG_VERSION"));

/// One of the host networks.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum AnyModel {
    Probe(LinearProbe),
    Mlp(MlpClassifier),
    Block(TinyTransformerBlock),
}

impl Model for AnyModel {
    fn layers(&self) -> Vec<&AdaptedLinear> {
        match self {
            AnyModel::Probe(m) => m.layers(),
            AnyModel::Mlp(m) => m.layers(),
            AnyModel::Block(m) => m.layers(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        match self {
            AnyModel::Probe(m) => m.layers_mut(),
            AnyModel::Mlp(m) => m.layers_mut(),
            AnyModel::Block(m) => m.layers_mut(),
        }
    }

    fn valid_targets(&self) -> &'static [&'static str] {
        match self {
            AnyModel::Probe(m) => m.valid_targets(),
            AnyModel::Mlp(m) => m.valid_targets(),
            AnyModel::Block(m) => m.valid_targets(),
        }
    }

    fn extra_frozen(&self) -> Vec<&[f64]> {
        match self {
            AnyModel::Probe(m) => m.extra_frozen(),
            AnyModel::Mlp(m) => m.extra_frozen(),
            AnyModel::Block(m) => m.extra_frozen(),
        }
    }

    fn run(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<Var> {
        match self {
            AnyModel::Probe(m) => m.run(tape, x, pass),
            AnyModel::Mlp(m) => m.run(tape, x, pass),
            AnyModel::Block(m) => m.run(tape, x, pass),
        }
    }
}

/// One of the synthetic tasks.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum AnyTask {
    Recovery(RecoveryTask),
    Classify(ClassificationTask),
    Block(BlockTask),
}

impl Dataset for AnyTask {
    fn steps_per_epoch(&self, batch_size: usize) -> usize {
        match self {
            AnyTask::Recovery(t) => t.steps_per_epoch(batch_size),
            AnyTask::Classify(t) => t.steps_per_epoch(batch_size),
            AnyTask::Block(t) => t.steps_per_epoch(batch_size),
        }
    }

    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Batch> {
        match self {
            AnyTask::Recovery(t) => t.train_batch(step, batch_size, seed),
            AnyTask::Classify(t) => t.train_batch(step, batch_size, seed),
            AnyTask::Block(t) => t.train_batch(step, batch_size, seed),
        }
    }

    fn eval_batches(&self) -> &[Batch] {
        match self {
            AnyTask::Recovery(t) => t.eval_batches(),
            AnyTask::Classify(t) => t.eval_batches(),
            AnyTask::Block(t) => t.eval_batches(),
        }
    }
}

/// Fills fields that depend on the task: empty targets, or the transformer
/// default on a host without those projections, become the task's targets.
pub fn resolve(mut config: RunConfig) -> Result<RunConfig> {
    let transformer_default = config
        .adapter
        .targets
        .iter()
        .map(String::as_str)
        .eq(TRANSFORMER_TARGETS);
    if config.adapter.targets.is_empty()
        || (transformer_default && config.task.kind != TaskKind::Block)
    {
        config.adapter.targets = config.task.kind.default_targets();
    }
    config.validate()?;
    Ok(config)
}

/// Task and adapter-free host model, both determined by `config.task`.
pub fn build_task(config: &RunConfig) -> Result<(AnyTask, AnyModel)> {
    let t = &config.task;
    let mut r = rng::stream(t.seed, &[rng::tag("task")]);
    Ok(match t.kind {
        TaskKind::Recovery => {
            let mut r = rng::stream(t.seed, &[rng::tag("recovery-task")]);
            let task = crate::experiments::make_recovery_task(t.m, t.n, t.k, &mut r)?;
            let model = AnyModel::Probe(task.probe()?);
            (AnyTask::Recovery(task), model)
        }
        TaskKind::Classify => {
            let task = ClassificationTask::new(t.n, t.hidden, t.classes, &mut r)?;
            let model = AnyModel::Mlp(task.student(t.hidden, &mut r));
            (AnyTask::Classify(task), model)
        }
        TaskKind::Block => {
            let task = BlockTask::new(t.d, t.tokens, t.k, &config.adapter.targets, &mut r)?;
            let model = AnyModel::Block(task.student());
            (AnyTask::Block(task), model)
        }
    })
}

/// Task plus host model with freshly attached adapters.
pub fn build_adapted(config: &RunConfig) -> Result<(AnyTask, AnyModel)> {
    let (task, mut model) = build_task(config)?;
    attach_adapters(&mut model, &config.adapter)?;
    Ok((task, model))
}

fn metadata(config: &RunConfig, extra: Value) -> Result<Value> {
    let mut meta = json!({
        "config": config.to_json()?,
        "seed": config.train.seed,
        "created_by": CREATED_BY,
    });
    if let (Some(obj), Value::Object(extra)) = (meta.as_object_mut(), extra) {
        obj.extend(extra);
    }
    Ok(meta)
}

pub fn adapter_checkpoint<M: Model + ?Sized>(model: &M, meta: Value) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(meta);
    for (name, ad) in model.adapters() {
        ck.push_adapter(name, ad)?;
    }
    Ok(ck)
}

/// Reads the config echoed into a checkpoint's metadata.
pub fn echoed_config(ck: &Checkpoint) -> Result<RunConfig> {
    let cfg = ck
        .metadata
        .get("config")
        .ok_or_else(|| Error::contract("checkpoint metadata has no config echo"))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

struct Snapshotter {
    every: usize,
    dir: PathBuf,
    config: Value,
    error: Option<Error>,
}

impl<M: Model + ?Sized> StepObserver<M> for Snapshotter {
    fn on_step(&mut self, view: &StepView<'_, M>) {
        let step = view.step + 1;
        if self.error.is_some() || !step.is_multiple_of(self.every) {
            return;
        }
        let meta = json!({"config": self.config, "step": step, "created_by": CREATED_BY});
        let path = self.dir.join(format!("step_{step:06}.dlra"));
        if let Err(e) = adapter_checkpoint(view.model, meta).and_then(|ck| ck.save(&path)) {
            self.error = Some(e);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

/// Trains on the configured task and writes `checkpoint.dlra`,
/// `metrics.csv`, `config.json` (and snapshots) into `config.out_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let config = resolve(config.clone())?;
    let (task, mut model) = build_adapted(&config)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    let echo = config.to_json()?;

    let mut snapshotter = config
        .snapshot_every
        .filter(|&n| n > 0)
        .map(|every| Snapshotter {
            every,
            dir: out.join("snapshots"),
            config: echo.clone(),
            error: None,
        });
    if let Some(s) = &snapshotter {
        std::fs::create_dir_all(&s.dir)?;
    }
    let report = match snapshotter.as_mut() {
        Some(s) => train_loop(&mut model, &task, &config.train, s)?,
        None => train_loop(&mut model, &task, &config.train, &mut ())?,
    };
    let mut snapshots = Vec::new();
    if let Some(s) = snapshotter {
        if let Some(e) = s.error {
            return Err(e);
        }
        for step in (s.every..=report.steps).step_by(s.every) {
            snapshots.push(s.dir.join(format!("step_{step:06}.dlra")));
        }
    }

    let meta = metadata(
        &config,
        json!({"step": report.steps, "final_eval_loss": report.final_eval.loss}),
    )?;
    let checkpoint = out.join("checkpoint.dlra");
    adapter_checkpoint(&model, meta)?.save(&checkpoint)?;
    let metrics = out.join("metrics.csv");
    csv::write_metrics(&metrics, &report.metrics)?;
    let config_path = out.join("config.json");
    crate::io::atomic_write(
        &config_path,
        serde_json::to_string_pretty(&echo)?.as_bytes(),
    )?;
    Ok(TrainOutcome {
        report,
        checkpoint,
        metrics,
        config: config_path,
        snapshots,
    })
}

/// Rebuilds the model recorded in an adapter checkpoint and evaluates it.
pub fn eval_checkpoint(path: &Path) -> Result<EvalMetrics> {
    let ck = Checkpoint::load(path)?;
    let config = echoed_config(&ck)?;
    let (task, mut model) = build_adapted(&config)?;
    ck.install(&mut model)?;
    model.set_mode(Mode::Eval);
    evaluate(&model, &task)
}

/// Folds a checkpoint's adapters into the base weights. The result holds
/// `<layer>.W` for every projection of the host model.
pub fn merge_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let config = echoed_config(&ck)?;
    let (_, mut model) = build_adapted(&config)?;
    ck.install(&mut model)?;
    model.merge_adapters()?;
    let mut merged = Checkpoint::new(metadata(&config, json!({"merged": true}))?);
    for layer in model.layers() {
        merged.push(format!("{}.W", layer.name()), layer.base().clone())?;
    }
    Ok(merged)
}

/// Evaluates an adapter-free model whose projections are loaded from a
/// merged-weights file.
pub fn eval_merged(path: &Path) -> Result<EvalMetrics> {
    let ck = Checkpoint::load(path)?;
    let config = echoed_config(&ck)?;
    let (task, mut model) = build_task(&config)?;
    for layer in model.layers_mut() {
        let name = format!("{}.W", layer.name());
        let w = ck
            .get(&name)
            .ok_or_else(|| Error::contract(format!("merged file has no tensor {name:?}")))?;
        layer.set_base(w.clone())?;
    }
    evaluate(&model, &task)
}

fn recovery_task(config: &RunConfig) -> Result<RecoveryTask> {
    if config.task.kind != TaskKind::Recovery {
        return Err(Error::config("sweeps run on the recovery task"));
    }
    match build_task(config)?.0 {
        AnyTask::Recovery(t) => Ok(t),
        _ => unreachable!("recovery kind builds a recovery task"),
    }
}

/// Runs the configured sweep grid.
pub fn sweep(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let config = resolve(config.clone())?;
    let task = recovery_task(&config)?;
    run_sweep(&config.sweep, &task, &config.adapter, &config.train)
}

/// Re-runs a single sweep cell.
pub fn sweep_cell(config: &RunConfig, cell: &SweepCell) -> Result<SweepRow> {
    let config = resolve(config.clone())?;
    let task = recovery_task(&config)?;
    Ok(run_cell(&task, cell, &config.adapter, &config.train))
}

/// Builds a trace from adapter snapshot files, ordered by their recorded step.
pub fn trace_files(
    paths: &[PathBuf],
    adapter: Option<&str>,
    view: SubspaceView,
) -> Result<(String, SubspaceTrace)> {
    let mut snaps = Vec::with_capacity(paths.len());
    let mut chosen: Option<String> = adapter.map(str::to_string);
    for path in paths {
        let ck = Checkpoint::load(path)?;
        let step = ck
            .metadata
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| {
                Error::contract(format!("{} has no step in its metadata", path.display()))
            })?;
        let name = match &chosen {
            Some(n) => n.clone(),
            None => {
                let first = ck
                    .adapter_names()
                    .first()
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::contract("snapshot holds no adapters"))?;
                chosen = Some(first.clone());
                first
            }
        };
        let get = |suffix: &str| {
            ck.get(&format!("{name}.{suffix}")).cloned().ok_or_else(|| {
                Error::contract(format!("{} has no adapter {name:?}", path.display()))
            })
        };
        let (a, b) = (get("A")?, get("B")?);
        let matrix = match view {
            SubspaceView::B => b,
            SubspaceView::A => a.transpose()?,
            SubspaceView::Delta => {
                let alpha = get("alpha")?.item();
                b.matmul(&a)?.scale(alpha / a.rows() as f64)?
            }
        };
        snaps.push((step as usize, matrix));
    }
    snaps.sort_by_key(|(s, _)| *s);
    let trace = subspace_trace(&snaps)?;
    Ok((chosen.unwrap_or_default(), trace))
}
