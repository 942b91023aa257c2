//! Synthetic tasks, sweep grids and subspace-drift diagnostics.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapters::{forward_droplora, AdapterConfig, LowRankAdapter, Method, Mode, RankMask};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nets::{attach_adapters, LinearProbe, MlpClassifier, Model, TinyTransformerBlock};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::training::{train_loop, Batch, Dataset, Targets, TrainConfig};

/// Samples drawn per nominal epoch by the synthetic datasets.
pub const DEFAULT_TRAIN_SIZE: usize = 4096;
pub const DEFAULT_EVAL_SIZE: usize = 256;

/// Noise-free regression onto `(W0 + ΔW*)·x` with `rank(ΔW*) = k` and
/// standard normal inputs.
#[derive(Debug, Clone)]
pub struct RecoveryTask {
    w0: Tensor,
    target_delta: Tensor,
    k: usize,
    train_size: usize,
    eval: Vec<Batch>,
}

/// Builds `ΔW* = U·Vᵀ/√k` with `U: m×k`, `V: n×k` standard normal, and a
/// random `N(0, 1/n)` base weight.
pub fn make_recovery_task(m: usize, n: usize, k: usize, rng: &mut Rng) -> Result<RecoveryTask> {
    if m == 0 || n == 0 {
        return Err(Error::contract("task dimensions must be positive"));
    }
    if k > m.min(n) {
        return Err(Error::contract(format!(
            "target rank {k} exceeds min({m}, {n})"
        )));
    }
    let w0 = Tensor::randn(&[m, n], 1.0 / (n as f64).sqrt(), rng);
    let target_delta = if k == 0 {
        Tensor::zeros(&[m, n])
    } else {
        let u = Tensor::randn(&[m, k], 1.0, rng);
        let v = Tensor::randn(&[n, k], 1.0, rng);
        u.matmul(&v.transpose()?)?.scale(1.0 / (k as f64).sqrt())?
    };
    let mut task = RecoveryTask {
        w0,
        target_delta,
        k,
        train_size: DEFAULT_TRAIN_SIZE,
        eval: Vec::new(),
    };
    let x = Tensor::randn(&[n, DEFAULT_EVAL_SIZE], 1.0, rng);
    task.eval = vec![task.batch_for(x)?];
    Ok(task)
}

impl RecoveryTask {
    /// The 64×64, rank-8 task from a fixed seed.
    pub fn reference(seed: u64) -> Result<Self> {
        make_recovery_task(
            64,
            64,
            8,
            &mut rng::stream(seed, &[rng::tag("recovery-task")]),
        )
    }

    pub fn base(&self) -> &Tensor {
        &self.w0
    }

    pub fn target_delta(&self) -> &Tensor {
        &self.target_delta
    }

    pub fn target_rank(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w0.rows(), self.w0.cols())
    }

    fn batch_for(&self, x: Tensor) -> Result<Batch> {
        let w = self.w0.add(&self.target_delta)?;
        let y = w.matmul(&x)?;
        Ok(Batch {
            inputs: x,
            targets: Targets::Values(y),
        })
    }

    /// A frozen probe over `W0`, ready for adapters.
    pub fn probe(&self) -> Result<LinearProbe> {
        LinearProbe::new(self.w0.clone())
    }

    /// `‖ΔW − ΔW*‖_F / ‖ΔW*‖_F` (absolute error when `ΔW* = 0`).
    pub fn relative_error(&self, delta: &Tensor) -> Result<f64> {
        let err = delta.sub(&self.target_delta)?.frobenius_norm();
        let norm = self.target_delta.frobenius_norm();
        Ok(if norm == 0.0 { err } else { err / norm })
    }

    /// Smallest relative error any rank-`r` update can reach.
    pub fn rank_floor(&self, r: usize) -> Result<f64> {
        let norm = self.target_delta.frobenius_norm();
        let floor = linalg::best_rank_k_error(&self.target_delta, r)?;
        Ok(if norm == 0.0 { floor } else { floor / norm })
    }
}

impl Dataset for RecoveryTask {
    fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.train_size.div_ceil(batch_size.max(1))
    }

    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Batch> {
        let mut r = rng::stream(seed, &[rng::tag("batch"), step as u64]);
        let x = Tensor::randn(&[self.w0.cols(), batch_size], 1.0, &mut r);
        self.batch_for(x)
    }

    fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }
}

/// Gaussian inputs labelled by the argmax of a random teacher MLP.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    teacher: MlpClassifier,
    inputs: usize,
    train_size: usize,
    eval: Vec<Batch>,
}

impl ClassificationTask {
    pub fn new(inputs: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("need at least two classes"));
        }
        let teacher = MlpClassifier::new(inputs, hidden, classes, rng);
        let mut task = Self {
            teacher,
            inputs,
            train_size: DEFAULT_TRAIN_SIZE,
            eval: Vec::new(),
        };
        let x = Tensor::randn(&[inputs, DEFAULT_EVAL_SIZE], 1.0, rng);
        task.eval = vec![task.label(x)?];
        Ok(task)
    }

    fn label(&self, x: Tensor) -> Result<Batch> {
        let mut tape = Tape::new();
        let out = crate::nets::forward_eval(&self.teacher, &mut tape, &x)?.output;
        let logits = tape.value(out);
        let labels = (0..x.cols())
            .map(|j| {
                (0..logits.rows())
                    .max_by(|&a, &b| logits.at(a, j).total_cmp(&logits.at(b, j)))
                    .unwrap_or(0)
            })
            .collect();
        Ok(Batch {
            inputs: x,
            targets: Targets::Classes(labels),
        })
    }

    pub fn classes(&self) -> usize {
        self.teacher.classes()
    }

    /// A fresh student network whose frozen base differs from the teacher.
    pub fn student(&self, hidden: usize, rng: &mut Rng) -> MlpClassifier {
        MlpClassifier::new(self.inputs, hidden, self.classes(), rng)
    }
}

impl Dataset for ClassificationTask {
    fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.train_size.div_ceil(batch_size.max(1))
    }

    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Batch> {
        let mut r = rng::stream(seed, &[rng::tag("batch"), step as u64]);
        self.label(Tensor::randn(&[self.inputs, batch_size], 1.0, &mut r))
    }

    fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }
}

/// Regression of a transformer block onto a teacher that shares its frozen
/// weights plus rank-`k` updates on the adapted projections.
#[derive(Debug, Clone)]
pub struct BlockTask {
    student: TinyTransformerBlock,
    teacher: TinyTransformerBlock,
    tokens: usize,
    train_size: usize,
    eval: Vec<Batch>,
}

impl BlockTask {
    pub fn new(
        d: usize,
        tokens: usize,
        k: usize,
        targets: &[String],
        rng: &mut Rng,
    ) -> Result<Self> {
        let student = TinyTransformerBlock::new(d, rng);
        let mut teacher = student.clone();
        let cfg = AdapterConfig {
            rank: k.max(1),
            alpha: k.max(1) as f64,
            targets: targets.to_vec(),
            input_dropout: 0.0,
            init_std: Some(1.0 / (d as f64).sqrt()),
            ..AdapterConfig::default()
        };
        attach_adapters(&mut teacher, &cfg)?;
        for layer in teacher.layers_mut() {
            if let Some(ad) = layer.adapter_mut() {
                let b = Tensor::randn(ad.b().shape(), 1.0 / (cfg.rank as f64).sqrt(), rng);
                let a = ad.a().clone();
                ad.set_factors(a, b)?;
            }
        }
        teacher.merge_adapters()?;
        let mut task = Self {
            student,
            teacher,
            tokens,
            train_size: DEFAULT_TRAIN_SIZE / tokens.max(1),
            eval: Vec::new(),
        };
        task.eval = (0..8)
            .map(|_| task.sequence(Tensor::randn(&[d, tokens], 1.0, rng)))
            .collect::<Result<_>>()?;
        Ok(task)
    }

    fn sequence(&self, x: Tensor) -> Result<Batch> {
        let mut tape = Tape::new();
        let out = crate::nets::forward_eval(&self.teacher, &mut tape, &x)?.output;
        Ok(Batch {
            targets: Targets::Values(tape.value(out).clone()),
            inputs: x,
        })
    }

    pub fn student(&self) -> TinyTransformerBlock {
        self.student.clone()
    }
}

impl Dataset for BlockTask {
    /// One sequence per step; `batch_size` is ignored.
    fn steps_per_epoch(&self, _batch_size: usize) -> usize {
        self.train_size.max(1)
    }

    fn train_batch(&self, step: usize, _batch_size: usize, seed: u64) -> Result<Batch> {
        let mut r = rng::stream(seed, &[rng::tag("batch"), step as u64]);
        self.sequence(Tensor::randn(&[self.student.d(), self.tokens], 1.0, &mut r))
    }

    fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub pruning_rates: Vec<f64>,
    pub ranks: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Run LoRA once per (rank, repeat) instead of once per rate.
    pub dedup_lora: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            methods: vec![Method::Lora, Method::Droplora],
            pruning_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            ranks: vec![8, 16, 32, 64],
            repeats: 3,
            base_seed: 0,
            dedup_lora: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.pruning_rates.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::config(format!("pruning rate {p} outside [0, 1)")));
        }
        if self.ranks.contains(&0) {
            return Err(Error::config("ranks must be at least 1"));
        }
        if self.repeats == 0 || self.methods.is_empty() {
            return Err(Error::config(
                "sweep needs at least one method and one repeat",
            ));
        }
        Ok(())
    }

    /// Grid cells ordered by method, rank, rate, repeat.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &rank in &self.ranks {
                let rates: &[f64] = if method == Method::Lora && self.dedup_lora {
                    &self.pruning_rates[..self.pruning_rates.len().min(1)]
                } else {
                    &self.pruning_rates
                };
                for &pruning_rate in rates {
                    for repeat in 0..self.repeats {
                        out.push(SweepCell {
                            method,
                            rank,
                            pruning_rate,
                            repeat,
                            seed: cell_seed(self.base_seed, rank, repeat),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Child seed of a cell. Method and rate are deliberately not mixed in, so
/// cells that differ only in those share initialization and data.
pub fn cell_seed(base: u64, rank: usize, repeat: usize) -> u64 {
    rng::derive_seed(base, &[rng::tag("cell"), rank as u64, repeat as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub rank: usize,
    pub pruning_rate: f64,
    pub repeat: usize,
    pub seed: u64,
}

impl SweepCell {
    /// Adapter config for this cell: `template` with the cell's method, rank,
    /// rate and seed, and `alpha = 2r`.
    pub fn adapter_config(&self, template: &AdapterConfig) -> AdapterConfig {
        AdapterConfig {
            method: self.method,
            rank: self.rank,
            alpha: 2.0 * self.rank as f64,
            pruning_prob: self.pruning_rate,
            seed: self.seed,
            targets: vec!["W".into()],
            ..template.clone()
        }
    }

    pub fn train_config(&self, template: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..template.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub status: CellStatus,
}

/// Trains one cell on the recovery task. Failures are captured in the row.
pub fn run_cell(
    task: &RecoveryTask,
    cell: &SweepCell,
    adapter_template: &AdapterConfig,
    train_template: &TrainConfig,
) -> SweepRow {
    let start = Instant::now();
    let outcome = (|| {
        let mut probe = task.probe()?;
        attach_adapters(&mut probe, &cell.adapter_config(adapter_template))?;
        train_loop(
            &mut probe,
            task,
            &cell.train_config(train_template),
            &mut (),
        )
    })();
    let wall_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(report) => SweepRow {
            cell: *cell,
            final_train_loss: report.final_train_loss,
            final_eval_loss: report.final_eval.loss,
            steps: report.steps,
            wall_seconds,
            status: CellStatus::Ok,
        },
        Err(e) => SweepRow {
            cell: *cell,
            final_train_loss: f64::NAN,
            final_eval_loss: f64::NAN,
            steps: 0,
            wall_seconds,
            status: CellStatus::Failed(e.to_string()),
        },
    }
}

/// Runs every cell of `spec`; rows come back in [`SweepSpec::cells`] order.
pub fn run_sweep(
    spec: &SweepSpec,
    task: &RecoveryTask,
    adapter_template: &AdapterConfig,
    train_template: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let cells = spec.cells();
    Ok(par::map(&cells, |cell| {
        run_cell(task, cell, adapter_template, train_template)
    }))
}

/// Which matrix of an adapter a subspace trace follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceView {
    /// Column space of `B`.
    #[default]
    B,
    /// Row space of `A`.
    A,
    /// Column space of `scaling·B·A`.
    Delta,
}

impl SubspaceView {
    pub fn extract(self, adapter: &LowRankAdapter) -> Result<Tensor> {
        match self {
            SubspaceView::B => Ok(adapter.b().clone()),
            SubspaceView::A => adapter.a().transpose(),
            SubspaceView::Delta => adapter.delta(),
        }
    }
}

impl std::str::FromStr for SubspaceView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b" => Ok(SubspaceView::B),
            "a" => Ok(SubspaceView::A),
            "delta" => Ok(SubspaceView::Delta),
            other => Err(Error::config(format!("unknown subspace view {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceTrace {
    pub steps: Vec<usize>,
    /// Orthonormal column basis per snapshot; `None` for a zero matrix.
    pub bases: Vec<Option<Tensor>>,
    /// Principal angles (ascending, radians) between consecutive snapshots;
    /// `None` when either side has no basis.
    pub angles: Vec<Option<Vec<f64>>>,
}

impl SubspaceTrace {
    /// Mean angle over the defined intervals among the first `intervals`.
    pub fn mean_angle(&self, intervals: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .angles
            .iter()
            .take(intervals)
            .flatten()
            .flat_map(|a| a.iter().copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Principal angles between the column spaces of consecutive snapshots.
pub fn subspace_trace(snapshots: &[(usize, Tensor)]) -> Result<SubspaceTrace> {
    if snapshots.len() < 2 {
        return Err(Error::contract(
            "subspace trace needs at least two snapshots",
        ));
    }
    if snapshots.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::contract(
            "snapshot steps must be strictly increasing",
        ));
    }
    let bases: Vec<Option<DMatrix<f64>>> = snapshots
        .iter()
        .map(|(_, m)| linalg::column_basis(m))
        .collect::<Result<_>>()?;
    let angles = bases
        .windows(2)
        .map(|w| match (&w[0], &w[1]) {
            (Some(a), Some(b)) => angles_between(a, b).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    Ok(SubspaceTrace {
        steps: snapshots.iter().map(|(s, _)| *s).collect(),
        bases: bases
            .iter()
            .map(|b| b.as_ref().map(linalg::from_dmatrix))
            .collect(),
        angles,
    })
}

/// Principal angles between the column spaces of `a` and `b`.
pub fn principal_angles(a: &Tensor, b: &Tensor) -> Result<Option<Vec<f64>>> {
    if a.rows() != b.rows() {
        return Err(Error::dim("principal_angles", a.shape(), b.shape()));
    }
    match (linalg::column_basis(a)?, linalg::column_basis(b)?) {
        (Some(qa), Some(qb)) => angles_between(&qa, &qb).map(Some),
        _ => Ok(None),
    }
}

/// Angles from cosines (singular values of `Q1ᵀQ2`) for large angles and
/// from sines (singular values of `Q2 − Q1Q1ᵀQ2`) for small ones, where the
/// arccos alone loses precision.
fn angles_between(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> Result<Vec<f64>> {
    if q1.nrows() != q2.nrows() {
        return Err(Error::Linalg("bases live in different spaces".into()));
    }
    let (q1, q2) = if q1.ncols() >= q2.ncols() {
        (q1, q2)
    } else {
        (q2, q1)
    };
    let q = q2.ncols();
    let mut cos: Vec<f64> = (q1.transpose() * q2)
        .singular_values()
        .iter()
        .copied()
        .collect();
    cos.sort_by(|a, b| b.total_cmp(a));
    let residual = q2 - q1 * (q1.transpose() * q2);
    let mut sin: Vec<f64> = residual.singular_values().iter().copied().collect();
    sin.sort_by(|a, b| a.total_cmp(b));
    Ok((0..q)
        .map(|i| {
            let c = cos.get(i).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let s = sin.get(i).copied().unwrap_or(1.0).clamp(0.0, 1.0);
            if c * c < 0.5 {
                c.acos()
            } else {
                s.asin()
            }
        })
        .collect())
}

/// Monte-Carlo mean of the train-mode adapter branch `h − W0·x` over
/// `draws` independent masks. Draws are split into fixed chunks with their
/// own streams, so the result does not depend on thread count.
pub fn mask_expectation(
    adapter: &LowRankAdapter,
    x: &Tensor,
    draws: usize,
    seed: u64,
) -> Result<Tensor> {
    const CHUNK: usize = 1000;
    if adapter.mode() != Mode::Train {
        return Err(Error::contract(
            "mask expectation needs a train-mode adapter",
        ));
    }
    let chunks: Vec<usize> = (0..draws.div_ceil(CHUNK)).collect();
    let (m, _) = (adapter.out_features(), adapter.in_features());
    let w0 = Tensor::zeros(&[m, adapter.in_features()]);
    let partial = par::map(&chunks, |&c| -> Result<Tensor> {
        let mut r = rng::stream(seed, &[rng::tag("mask-mc"), c as u64]);
        let count = CHUNK.min(draws - c * CHUNK);
        let mut acc = Tensor::zeros(&[m, x.cols()]);
        for _ in 0..count {
            let mask: RankMask =
                crate::adapters::sample_mask(&mut r, adapter.rank(), adapter.pruning_prob())?;
            let mut tape = Tape::new();
            let vars = adapter.vars(&mut tape);
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w0.clone());
            let h = forward_droplora(&mut tape, xv, wv, adapter, vars, &mask, None)?;
            acc = acc.add(tape.value(h))?;
        }
        Ok(acc)
    });
    let mut total = Tensor::zeros(&[m, x.cols()]);
    for p in partial {
        total = total.add(&p?)?;
    }
    total.scale(1.0 / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_task_rank_and_edges() {
        let mut r = rng::stream(1, &[]);
        let t = make_recovery_task(12, 10, 3, &mut r).unwrap();
        let sv = linalg::singular_values(t.target_delta()).unwrap();
        assert!(sv[2] > 1e-9 * sv[0]);
        assert!(sv[3] < 1e-9 * sv[0]);
        assert!(make_recovery_task(4, 4, 5, &mut r).is_err());

        let zero = make_recovery_task(5, 5, 0, &mut r).unwrap();
        assert_eq!(zero.target_delta().frobenius_norm(), 0.0);
        assert_eq!(zero.relative_error(&Tensor::zeros(&[5, 5])).unwrap(), 0.0);
    }

    #[test]
    fn reference_task_is_fixed() {
        let a = RecoveryTask::reference(0).unwrap();
        let b = RecoveryTask::reference(0).unwrap();
        assert_eq!(a.dims(), (64, 64));
        assert_eq!(a.target_rank(), 8);
        assert!(a.target_delta().bit_eq(b.target_delta()));
    }

    #[test]
    fn grid_counts() {
        let spec = SweepSpec::default();
        assert_eq!(spec.cells().len(), 120);
        let dedup = SweepSpec {
            dedup_lora: true,
            ..SweepSpec::default()
        };
        assert_eq!(dedup.cells().len(), 4 * 3 + 5 * 4 * 3);
        assert!(SweepSpec {
            ranks: vec![0],
            ..SweepSpec::default()
        }
        .validate()
        .is_err());
        assert!(SweepSpec {
            pruning_rates: vec![1.0],
            ..SweepSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn identical_snapshots_have_zero_angles() {
        let m = Tensor::randn(&[6, 3], 1.0, &mut rng::stream(2, &[]));
        let trace = subspace_trace(&[(0, m.clone()), (1, m)]).unwrap();
        let angles = trace.angles[0].as_ref().unwrap();
        assert_eq!(angles.len(), 3);
        assert!(angles.iter().all(|&a| a.abs() < 1e-12), "{angles:?}");
    }

    #[test]
    fn orthogonal_planes_are_right_angles() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]).unwrap();
        let angles = principal_angles(&a, &b).unwrap().unwrap();
        for a in angles {
            assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_line_angle() {
        let theta = 0.3f64;
        let a = Tensor::column(vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::column(vec![theta.cos(), theta.sin(), 0.0]).unwrap();
        let angles = principal_angles(&a, &b).unwrap().unwrap();
        assert!((angles[0] - theta).abs() < 1e-9);
    }

    #[test]
    fn zero_snapshot_is_missing() {
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng::stream(3, &[]));
        let trace = subspace_trace(&[(0, a), (5, b.clone()), (9, b)]).unwrap();
        assert!(trace.angles[0].is_none());
        assert!(trace.angles[1].is_some());
        assert!(subspace_trace(&[(0, Tensor::zeros(&[2, 2]))]).is_err());
    }
}
