//! AdamW with linear warmup/decay, and the adapter training loop.

use serde::{Deserialize, Serialize};

use crate::adapters::Mode;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{forward_eval, forward_train, Model, Pass};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// Ramp 0 → lr over the warmup, then decay linearly to 0.
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs × steps_per_epoch` when set.
    pub steps: Option<usize>,
    pub scheduler: Scheduler,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many steps in addition to the end of training.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 128,
            warmup_steps: 100,
            epochs: 3,
            steps: None,
            scheduler: Scheduler::Linear,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        self.steps.unwrap_or(self.epochs * steps_per_epoch)
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if total_steps < self.warmup_steps {
            return Err(Error::config(format!(
                "total steps {total_steps} shorter than warmup {}",
                self.warmup_steps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("AdamW betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config(
                "eps must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` (0-based) of `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond schedule end {total_steps}"
        )));
    }
    let lr = config.learning_rate;
    Ok(match config.scheduler {
        Scheduler::Constant => lr,
        Scheduler::Linear => {
            let warmup = config.warmup_steps;
            if step < warmup {
                lr * step as f64 / warmup as f64
            } else {
                let span = (total_steps - warmup).max(1) as f64;
                lr * (total_steps - step) as f64 / span
            }
        }
    })
}

/// First/second moment buffers for a fixed list of parameters.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    state: &mut AdamWState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.step == 0 {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return Err(Error::contract(
            "parameter list changed between AdamW steps",
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let g = g.ok_or_else(|| Error::contract(format!("missing gradient for parameter {i}")))?;
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        if p.data().iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression targets shaped like the model output.
    Values(Tensor),
    /// One class index per input column.
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Samples as columns.
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source of training batches and a fixed evaluation set.
pub trait Dataset {
    fn steps_per_epoch(&self, batch_size: usize) -> usize;

    /// Batch for optimizer step `step`, a pure function of its arguments.
    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<Batch>;

    fn eval_batches(&self) -> &[Batch];
}

/// MSE for value targets; cross-entropy for class targets (the model emits
/// `classes×batch` logits).
pub fn loss_fn(tape: &mut Tape, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Values(t) => tape.mse(output, t),
        Targets::Classes(labels) => {
            let logits = tape.transpose(output)?;
            tape.cross_entropy(logits, labels)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
    pub mean_mask_popcount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub final_train_loss: f64,
    pub final_eval: EvalMetrics,
    pub steps: usize,
}

/// Per-step view handed to a [`StepObserver`].
pub struct StepView<'a, M: ?Sized> {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub model: &'a M,
    pub tape: &'a Tape,
    pub pass: &'a Pass,
}

/// Hooks into the training loop.
pub trait StepObserver<M: ?Sized> {
    /// After backward, before the optimizer update.
    fn on_gradients(&mut self, _view: &StepView<'_, M>) {}

    /// After the optimizer update; `view.model` holds the new weights.
    fn on_step(&mut self, _view: &StepView<'_, M>) {}

    fn on_metric(&mut self, _row: &MetricRow) {}
}

impl<M: ?Sized> StepObserver<M> for () {}

fn mean_popcount<M: Model + ?Sized>(model: &M) -> f64 {
    let ads = model.adapters();
    if ads.is_empty() {
        return 0.0;
    }
    let total: usize = ads
        .iter()
        .map(|(_, a)| a.current_mask().map_or(a.rank(), |m| m.popcount()))
        .sum();
    total as f64 / ads.len() as f64
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains every adapter of `model` on `data`.
///
/// Each optimizer step draws one fresh rank mask per adapter, runs a
/// train-mode forward and backward, and applies AdamW to the adapter
/// factors only. The model is left in eval mode.
pub fn train_loop<M, D>(
    model: &mut M,
    data: &D,
    config: &TrainConfig,
    observer: &mut dyn StepObserver<M>,
) -> Result<TrainReport>
where
    M: Model + ?Sized,
    D: Dataset + ?Sized,
{
    let total = config.total_steps(data.steps_per_epoch(config.batch_size));
    config.validate(total)?;
    if model.adapters().is_empty() {
        return Err(Error::contract("model has no adapters to train"));
    }

    let mut state = AdamWState::new();
    let mut metrics = Vec::with_capacity(total + 1);
    let mut final_train_loss = f64::NAN;
    model.set_mode(Mode::Train);

    for step in 0..total {
        model.resample_masks()?;
        let batch = data.train_batch(step, config.batch_size, config.seed)?;
        let mut tape = Tape::new();
        let fwd = forward_train(model, &mut tape, &batch.inputs).map_err(diverged(step))?;
        let loss_var = loss_fn(&mut tape, fwd.output, &batch.targets).map_err(diverged(step))?;
        let loss = tape.value(loss_var).item();
        tape.backward(loss_var).map_err(diverged(step))?;
        let lr = lr_at(step, config, total)?;

        observer.on_gradients(&StepView {
            step,
            loss,
            lr,
            model: &*model,
            tape: &tape,
            pass: &fwd.pass,
        });

        let grads: Vec<Option<&Tensor>> = fwd
            .pass
            .vars()
            .iter()
            .flatten()
            .flat_map(|v| [tape.grad(v.a), tape.grad(v.b)])
            .collect();
        let mut params: Vec<&mut Tensor> = model
            .layers_mut()
            .into_iter()
            .filter_map(|l| l.adapter_mut())
            .flat_map(|ad| {
                let (a, b) = ad.factors_mut();
                [a, b]
            })
            .collect();
        adamw_step(&mut params, &grads, &mut state, lr, config).map_err(diverged(step))?;

        let row = MetricRow {
            step,
            split: Split::Train,
            loss,
            lr,
            mean_mask_popcount: mean_popcount(&*model),
        };
        observer.on_metric(&row);
        metrics.push(row);
        final_train_loss = loss;

        observer.on_step(&StepView {
            step,
            loss,
            lr,
            model: &*model,
            tape: &tape,
            pass: &fwd.pass,
        });

        if let Some(every) = config.eval_every.filter(|&e| e > 0) {
            if (step + 1) % every == 0 && step + 1 < total {
                model.set_mode(Mode::Eval);
                let eval = evaluate(&*model, data)?;
                model.set_mode(Mode::Train);
                let row = eval_row(step + 1, lr_at(step + 1, config, total)?, eval, &*model);
                observer.on_metric(&row);
                metrics.push(row);
            }
        }
    }

    model.set_mode(Mode::Eval);
    let final_eval = evaluate(&*model, data)?;
    let row = eval_row(total, lr_at(total, config, total)?, final_eval, &*model);
    observer.on_metric(&row);
    metrics.push(row);

    Ok(TrainReport {
        metrics,
        final_train_loss,
        final_eval,
        steps: total,
    })
}

fn eval_row<M: Model + ?Sized>(step: usize, lr: f64, eval: EvalMetrics, model: &M) -> MetricRow {
    let ads = model.adapters();
    let full = if ads.is_empty() {
        0.0
    } else {
        ads.iter().map(|(_, a)| a.rank()).sum::<usize>() as f64 / ads.len() as f64
    };
    MetricRow {
        step,
        split: Split::Eval,
        loss: eval.loss,
        lr,
        mean_mask_popcount: full,
    }
}

/// Sample-weighted mean loss (and accuracy for class targets) over the
/// dataset's eval batches. Requires every adapter to be in eval mode and
/// draws no randomness.
pub fn evaluate<M, D>(model: &M, data: &D) -> Result<EvalMetrics>
where
    M: Model + ?Sized,
    D: Dataset + ?Sized,
{
    if model.adapters().iter().any(|(_, a)| a.mode() != Mode::Eval) {
        return Err(Error::contract(
            "evaluate requires every adapter in eval mode",
        ));
    }
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut correct = 0usize;
    let mut classified = 0usize;
    for batch in data.eval_batches() {
        let mut tape = Tape::new();
        let fwd = forward_eval(model, &mut tape, &batch.inputs)?;
        let loss = loss_fn(&mut tape, fwd.output, &batch.targets)?;
        loss_sum += tape.value(loss).item() * batch.len() as f64;
        seen += batch.len();
        if let Targets::Classes(labels) = &batch.targets {
            let logits = tape.value(fwd.output);
            for (j, &label) in labels.iter().enumerate() {
                let pred = (0..logits.rows())
                    .max_by(|&a, &b| logits.at(a, j).total_cmp(&logits.at(b, j)))
                    .unwrap_or(0);
                correct += usize::from(pred == label);
            }
            classified += labels.len();
        }
    }
    if seen == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    Ok(EvalMetrics {
        loss: loss_sum / seen as f64,
        accuracy: (classified > 0).then(|| correct as f64 / classified as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            scheduler: Scheduler::Constant,
            warmup_steps: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let c = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_at(0, &c, total).unwrap(), 0.0);
        assert_eq!(lr_at(100, &c, total).unwrap(), 3e-4);
        assert_eq!(lr_at(50, &c, total).unwrap(), 3e-4 * 0.5);
        let mid = (100 + total) / 2;
        let expected = 3e-4 * (total - mid) as f64 / (total - 100) as f64;
        assert_eq!(lr_at(mid, &c, total).unwrap(), expected);
        assert_eq!(lr_at(total, &c, total).unwrap(), 0.0);
        assert!(matches!(
            lr_at(total + 1, &c, total),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_rejects_bad_values() {
        let c = TrainConfig::default();
        assert!(c.validate(50).is_err());
        assert!(c.validate(100).is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate(1000).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamWState::new();
        let c = cfg(1e-2, 0.0);
        for _ in 0..5 {
            adamw_step(&mut [&mut w], &[Some(&g)], &mut state, 1e-2, &c).unwrap();
        }
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(state.step(), 5);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut w = Tensor::vector(vec![3.0]).unwrap();
        let g = Tensor::zeros(&[1]);
        let mut state = AdamWState::new();
        let c = cfg(1e-2, 0.1);
        let mut prev = 3.0f64;
        for _ in 0..20 {
            adamw_step(&mut [&mut w], &[Some(&g)], &mut state, 1e-2, &c).unwrap();
            assert!(w.item().abs() < prev);
            prev = w.item().abs();
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut w = Tensor::vector(vec![0.0]).unwrap();
        let mut state = AdamWState::new();
        let c = cfg(1e-2, 0.0);
        for _ in 0..2000 {
            let g = Tensor::vector(vec![w.item() - 5.0]).unwrap();
            adamw_step(&mut [&mut w], &[Some(&g)], &mut state, 1e-2, &c).unwrap();
        }
        assert!((w.item() - 5.0).abs() < 1e-3, "w = {}", w.item());
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut w = Tensor::vector(vec![0.0]).unwrap();
        let mut state = AdamWState::new();
        let err = adamw_step(&mut [&mut w], &[None], &mut state, 1e-2, &cfg(1e-2, 0.0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
