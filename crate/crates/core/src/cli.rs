//! Command-line front end. `run` parses arguments, dispatches to
//! [`crate::runner`] and returns the process exit code.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::adapters::Method;
use crate::error::{Error, Result};
use crate::experiments::{cell_seed, SubspaceView, SweepCell};
use crate::io::config::{RunConfig, TaskKind};
use crate::io::{atomic_write, csv};
use crate::runner;

#[derive(Debug, Parser)]
#[command(
    name = "droplora",
    version,
    about = "Low-rank adapters with rank-dimension pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train adapters on a synthetic task and write a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint (or a merged weights file with --merged).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Treat the file as merged dense weights.
        #[arg(long)]
        merged: bool,
    },
    /// Fold adapters into the base weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a method x rank x rate grid on the recovery task.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        sweep_seed: Option<u64>,
        /// Re-run a single cell given as method:rank:rate:repeat.
        #[arg(long)]
        cell: Option<String>,
    },
    /// Principal angles between consecutive adapter snapshots.
    Trace {
        /// Snapshot files, or a directory holding them.
        #[arg(long, num_args = 1.., required = true)]
        snapshots: Vec<PathBuf>,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        view: Option<SubspaceView>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rank: Option<usize>,
    /// Defaults to twice the rank when only --rank is given.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    pruning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long)]
    no_rescale: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seed for adapter init, masks and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Seed of the synthetic task itself.
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        let a = &mut c.adapter;
        if let Some(m) = self.method {
            a.method = m;
        }
        if let Some(r) = self.rank {
            a.rank = r;
            a.alpha = 2.0 * r as f64;
        }
        if let Some(alpha) = self.alpha {
            a.alpha = alpha;
        }
        if let Some(p) = self.pruning_rate {
            a.pruning_prob = p;
        }
        if let Some(d) = self.dropout {
            a.input_dropout = d;
        }
        if let Some(t) = &self.targets {
            a.targets = t.clone();
        }
        if self.no_rescale {
            a.rescale = false;
        }
        if let Some(s) = self.seed {
            a.seed = s;
            c.train.seed = s;
        }
        let t = &mut c.train;
        if let Some(lr) = self.lr {
            t.learning_rate = lr;
        }
        if let Some(w) = self.warmup {
            t.warmup_steps = w;
        }
        if let Some(b) = self.batch {
            t.batch_size = b;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if self.steps.is_some() {
            t.steps = self.steps;
        }
        if let Some(wd) = self.weight_decay {
            t.weight_decay = wd;
        }
        if let Some(k) = self.task {
            c.task.kind = k;
        }
        if let Some(s) = self.task_seed {
            c.task.seed = s;
        }
        if self.snapshot_every.is_some() {
            c.snapshot_every = self.snapshot_every;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        runner::resolve(c)
    }
}

fn parse_cell(spec: &str, base_seed: u64) -> Result<SweepCell> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::config(format!("cell {spec:?} is not method:rank:rate:repeat"));
    let [method, rank, rate, repeat] = parts[..] else {
        return Err(bad());
    };
    let rank: usize = rank.parse().map_err(|_| bad())?;
    let repeat: usize = repeat.parse().map_err(|_| bad())?;
    Ok(SweepCell {
        method: method.parse()?,
        rank,
        pruning_rate: rate.parse().map_err(|_| bad())?,
        repeat,
        seed: cell_seed(base_seed, rank, repeat),
    })
}

fn snapshot_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "dlra"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(args) => {
            let config = args.config()?;
            let res = runner::train(&config)?;
            let line = json!({
                "steps": res.report.steps,
                "final_train_loss": res.report.final_train_loss,
                "eval_loss": res.report.final_eval.loss,
                "eval_accuracy": res.report.final_eval.accuracy,
                "checkpoint": res.checkpoint,
            });
            writeln!(out, "{line}")?;
        }
        Command::Eval { checkpoint, merged } => {
            let m = if merged {
                runner::eval_merged(&checkpoint)?
            } else {
                runner::eval_checkpoint(&checkpoint)?
            };
            writeln!(
                out,
                "{}",
                json!({"eval_loss": m.loss, "eval_accuracy": m.accuracy})
            )?;
        }
        Command::Merge {
            checkpoint,
            out: dest,
        } => {
            runner::merge_checkpoint(&checkpoint)?.save(&dest)?;
            writeln!(out, "{}", dest.display())?;
        }
        Command::Sweep {
            run,
            ranks,
            rates,
            repeats,
            sweep_seed,
            cell,
        } => {
            let mut config = run.config()?;
            let s = &mut config.sweep;
            if let Some(r) = ranks {
                s.ranks = r;
            }
            if let Some(r) = rates {
                s.pruning_rates = r;
            }
            if let Some(n) = repeats {
                s.repeats = n;
            }
            if let Some(seed) = sweep_seed {
                s.base_seed = seed;
            }
            if let Some(spec) = cell {
                let cell = parse_cell(&spec, config.sweep.base_seed)?;
                let row = runner::sweep_cell(&config, &cell)?;
                out.write_all(&csv::render(&[row])?)?;
                return Ok(());
            }
            let rows = runner::sweep(&config)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let csv_path = config.out_dir.join("sweep.csv");
            csv::write_sweep(&csv_path, &rows)?;
            let echo = serde_json::to_string_pretty(&config.to_json()?)?;
            atomic_write(&config.out_dir.join("sweep.config.json"), echo.as_bytes())?;
            writeln!(out, "{}", csv_path.display())?;
        }
        Command::Trace {
            snapshots,
            adapter,
            view,
            out: dest,
        } => {
            let files = snapshot_files(&snapshots)?;
            let view = view.unwrap_or_default();
            let (_, trace) = runner::trace_files(&files, adapter.as_deref(), view)?;
            csv::write_trace(&dest, &trace)?;
            writeln!(out, "{}", dest.display())?;
        }
    }
    Ok(())
}

/// Runs the CLI with explicit argument list and output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Runs the CLI on the process arguments.
pub fn run() -> i32 {
    run_with(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    )
}
