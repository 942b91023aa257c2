//! LoRA and DropLoRA adapters.
//!
//! An adapter adds `scaling · B · A` to a frozen weight `W0` (`m×n`), with
//! `A: r×n`, `B: m×r` and `scaling = alpha / r`. The DropLoRA variant samples
//! a fresh Bernoulli mask over the `r` rank dimensions at every optimizer
//! step and applies it, with inverted-dropout rescaling, to the hidden
//! activation `A·x` between the two factors. In eval mode the mask is
//! skipped and both variants compute the same function.
//!
//! Layout: weights act on column vectors, so batched inputs are `n×batch`
//! and outputs are `m×batch`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Projection names an adapter may target in the transformer block.
pub const TRANSFORMER_TARGETS: [&str; 5] = ["Q", "K", "V", "Up", "Down"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain low-rank adapter, no rank mask.
    Lora,
    /// Rank-dimension Bernoulli pruning between the factors.
    Droplora,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Droplora => "droplora",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(Method::Lora),
            "droplora" => Ok(Method::Droplora),
            other => Err(Error::config(format!(
                "unknown method {other:?}, expected lora or droplora"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub method: Method,
    pub rank: usize,
    /// Probability that a rank dimension is pruned at a given step.
    pub pruning_prob: f64,
    pub alpha: f64,
    /// Elementwise dropout on the adapter-branch input, train mode only.
    pub input_dropout: f64,
    pub targets: Vec<String>,
    pub seed: u64,
    /// Standard deviation of the Gaussian init of `A`; `1/r` when unset.
    pub init_std: Option<f64>,
    /// Rescale kept rank dimensions by `1/(1-p)` during training. Turning
    /// this off gives the bare binary mask.
    pub rescale: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: Method::Droplora,
            rank: 32,
            pruning_prob: 0.3,
            alpha: 64.0,
            input_dropout: 0.05,
            targets: TRANSFORMER_TARGETS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            init_std: None,
            rescale: true,
        }
    }
}

impl AdapterConfig {
    /// Config of the given rank with `alpha = 2r`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.pruning_prob) {
            return Err(Error::config(format!(
                "pruning probability {} outside [0, 1)",
                self.pruning_prob
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::config(format!(
                "input dropout {} outside [0, 1)",
                self.input_dropout
            )));
        }
        if let Some(std) = self.init_std {
            if !(std.is_finite() && std >= 0.0) {
                return Err(Error::config(format!("invalid init std {std}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.targets.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::config(format!("duplicate target {dup:?}")));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Binary keep-mask over the rank dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMask {
    bits: Vec<bool>,
    p: f64,
    keep_scale: f64,
}

impl RankMask {
    pub fn from_bits(bits: Vec<bool>, p: f64) -> Result<Self> {
        check_prob(p)?;
        Ok(Self {
            bits,
            p,
            keep_scale: 1.0 / (1.0 - p),
        })
    }

    pub fn ones(r: usize) -> Self {
        Self {
            bits: vec![true; r],
            p: 0.0,
            keep_scale: 1.0,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn keep_scale(&self) -> f64 {
        self.keep_scale
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bits as a `0.0/1.0` vector.
    pub fn binary(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![self.bits.len()], data)
    }

    /// Bits times `keep_scale`, the per-dimension multiplier used in training.
    pub fn scaled(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { self.keep_scale } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![self.bits.len()], data)
    }

    /// Elementwise AND of two masks of the same length.
    pub fn intersect(&self, other: &RankMask) -> Result<RankMask> {
        if self.len() != other.len() {
            return Err(Error::dim("mask intersect", &[self.len()], &[other.len()]));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        RankMask::from_bits(bits, self.p)
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "pruning probability {p} outside [0, 1)"
        )))
    }
}

/// Draws each bit independently: pruned (0) with probability `p`, kept (1)
/// otherwise.
pub fn sample_mask(rng: &mut Rng, r: usize, p: f64) -> Result<RankMask> {
    check_prob(p)?;
    let bits = (0..r).map(|_| rng.random::<f64>() >= p).collect();
    RankMask::from_bits(bits, p)
}

/// Tape handles for an adapter's trainable factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    a: Tensor,
    b: Tensor,
    alpha: f64,
    scaling: f64,
    method: Method,
    mode: Mode,
    pruning_prob: f64,
    input_dropout: f64,
    rescale: bool,
    mask_rng: Rng,
    dropout_rng: Rng,
    current_mask: Option<RankMask>,
}

/// Fresh adapter for an `m×n` weight: `A ~ N(0, σ²)` with `σ = init_std` or
/// `1/r`, `B = 0`, train mode. The mask and input-dropout streams are seeded
/// from `rng`, so adapters initialized from distinct streams are independent.
pub fn init_adapter(
    config: &AdapterConfig,
    m: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<LowRankAdapter> {
    config.validate()?;
    if m == 0 || n == 0 {
        return Err(Error::contract(format!(
            "adapter shape {m}x{n} must be non-empty"
        )));
    }
    let r = config.rank;
    let std = config.init_std.unwrap_or(1.0 / r as f64);
    let a = Tensor::randn(&[r, n], std, rng);
    let b = Tensor::zeros(&[m, r]);
    let mask_rng = crate::rng::stream(rng.random(), &[crate::rng::tag("mask")]);
    let dropout_rng = crate::rng::stream(rng.random(), &[crate::rng::tag("input-dropout")]);
    Ok(LowRankAdapter {
        a,
        b,
        alpha: config.alpha,
        scaling: config.scaling(),
        method: config.method,
        mode: Mode::Train,
        pruning_prob: config.pruning_prob,
        input_dropout: config.input_dropout,
        rescale: config.rescale,
        mask_rng,
        dropout_rng,
        current_mask: None,
    })
}

impl LowRankAdapter {
    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_features(&self) -> usize {
        self.a.cols()
    }

    pub fn out_features(&self) -> usize {
        self.b.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn pruning_prob(&self) -> f64 {
        self.pruning_prob
    }

    pub fn input_dropout(&self) -> f64 {
        self.input_dropout
    }

    pub fn rescale(&self) -> bool {
        self.rescale
    }

    pub fn trainable_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Replaces both factors; shapes must match the current ones.
    pub fn set_factors(&mut self, a: Tensor, b: Tensor) -> Result<()> {
        if a.shape() != self.a.shape() {
            return Err(Error::dim("set_factors", self.a.shape(), a.shape()));
        }
        if b.shape() != self.b.shape() {
            return Err(Error::dim("set_factors", self.b.shape(), b.shape()));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    /// Alpha changes scaling but not the factors.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        self.alpha = alpha;
        self.scaling = alpha / self.rank() as f64;
        Ok(())
    }

    /// Draws this step's rank mask from the adapter's own stream. Only
    /// DropLoRA adapters in train mode draw; otherwise the mask is cleared.
    pub fn resample_mask(&mut self) -> Result<Option<&RankMask>> {
        let r = self.rank();
        self.current_mask = if self.method == Method::Droplora && self.mode == Mode::Train {
            Some(sample_mask(&mut self.mask_rng, r, self.pruning_prob)?)
        } else {
            None
        };
        Ok(self.current_mask.as_ref())
    }

    /// Pins the mask used by subsequent train-mode forwards.
    pub fn set_mask(&mut self, mask: RankMask) -> Result<()> {
        if mask.len() != self.rank() {
            return Err(Error::dim("set_mask", &[self.rank()], &[mask.len()]));
        }
        self.current_mask = Some(mask);
        Ok(())
    }

    pub fn current_mask(&self) -> Option<&RankMask> {
        self.current_mask.as_ref()
    }

    /// Inverted-dropout mask for the branch input, or `None` outside
    /// training or when the rate is zero.
    pub fn draw_input_mask(&mut self, shape: &[usize]) -> Option<Tensor> {
        if self.mode != Mode::Train || self.input_dropout == 0.0 {
            return None;
        }
        let q = self.input_dropout;
        let keep = 1.0 / (1.0 - q);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.dropout_rng.random::<f64>() >= q {
                    keep
                } else {
                    0.0
                }
            })
            .collect();
        Some(Tensor::from_parts(shape.to_vec(), data))
    }

    /// The mask a train-mode forward should apply right now.
    ///
    /// Errors for a DropLoRA adapter in train mode with no mask drawn for the
    /// current step.
    pub fn step_mask(&self) -> Result<Option<&RankMask>> {
        match (self.method, self.mode) {
            (Method::Droplora, Mode::Train) => self
                .current_mask
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::contract("no rank mask sampled for this step")),
            _ => Ok(None),
        }
    }

    /// Registers `A` and `B` on the tape as trainable leaves.
    pub fn vars(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            a: tape.param(self.a.clone()),
            b: tape.param(self.b.clone()),
        }
    }

    /// `scaling · B · A`.
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)?.scale(self.scaling)
    }

    /// Eval-semantics forward on plain tensors.
    pub fn eval_output(&self, x: &Tensor, w0: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w0.clone());
        let h = adapter_forward(&mut tape, xv, wv, self, vars, None, None)?;
        Ok(tape.value(h).clone())
    }
}

fn check_layer(tape: &Tape, x: Var, w0: Var, adapter: &LowRankAdapter) -> Result<()> {
    let w = tape.value(w0);
    let (m, n) = w.dims2("adapter forward")?;
    if m != adapter.out_features() || n != adapter.in_features() {
        return Err(Error::dim(
            "adapter forward",
            w.shape(),
            &[adapter.out_features(), adapter.in_features()],
        ));
    }
    let xs = tape.value(x);
    let (xn, _) = xs.dims2("adapter forward")?;
    if xn != n {
        return Err(Error::dim("adapter forward", w.shape(), xs.shape()));
    }
    Ok(())
}

/// `W0·x + scaling · B · (rank_scale ⊙ (A · x̃))`, where `x̃` is `x` after
/// the optional input-dropout mask.
fn adapter_forward(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    adapter: &LowRankAdapter,
    vars: AdapterVars,
    input_mask: Option<&Tensor>,
    rank_scale: Option<Tensor>,
) -> Result<Var> {
    check_layer(tape, x, w0, adapter)?;
    let base = tape.matmul(w0, x)?;
    let branch_in = match input_mask {
        Some(mask) => {
            let mv = tape.constant(mask.clone());
            tape.hadamard(x, mv)?
        }
        None => x,
    };
    let mut hidden = tape.matmul(vars.a, branch_in)?;
    if let Some(scale) = rank_scale {
        let sv = tape.constant(scale);
        hidden = tape.hadamard_along(hidden, sv, Axis::Rows)?;
    }
    let up = tape.matmul(vars.b, hidden)?;
    let branch = tape.scale(up, adapter.scaling)?;
    tape.add(base, branch)
}

/// `h = W0·x + scaling·B·(A·x)`. In train mode `input_mask`, when given, is
/// applied to the branch input; in eval mode it is ignored.
pub fn forward_lora(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    adapter: &LowRankAdapter,
    vars: AdapterVars,
    input_mask: Option<&Tensor>,
) -> Result<Var> {
    let input_mask = input_mask.filter(|_| adapter.mode == Mode::Train);
    adapter_forward(tape, x, w0, adapter, vars, input_mask, None)
}

/// Train mode: `h = W0·x + scaling·B·(keep_scale·(bits ⊙ (A·x)))`, the mask
/// entering once between the factors. Eval mode: exactly [`forward_lora`].
pub fn forward_droplora(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    adapter: &LowRankAdapter,
    vars: AdapterVars,
    mask: &RankMask,
    input_mask: Option<&Tensor>,
) -> Result<Var> {
    if adapter.mode == Mode::Eval {
        return forward_lora(tape, x, w0, adapter, vars, input_mask);
    }
    if mask.len() != adapter.rank() {
        return Err(Error::dim(
            "forward_droplora",
            &[adapter.rank()],
            &[mask.len()],
        ));
    }
    let scale = if adapter.rescale {
        mask.scaled()
    } else {
        mask.binary()
    };
    adapter_forward(tape, x, w0, adapter, vars, input_mask, Some(scale))
}

/// `(B ⊙ M)·(M ⊙ A)` with the binary mask and no scaling of any kind.
pub fn masked_delta(adapter: &LowRankAdapter, mask: &RankMask) -> Result<Tensor> {
    masked_product(&adapter.b, &adapter.a, mask, mask)
}

/// `(B ⊙ M_b)·(M_a ⊙ A)` for binary masks on `B`'s columns and `A`'s rows.
pub fn masked_product(
    b: &Tensor,
    a: &Tensor,
    mask_b: &RankMask,
    mask_a: &RankMask,
) -> Result<Tensor> {
    let r = a.rows();
    if mask_a.len() != r || mask_b.len() != r || b.cols() != r {
        return Err(Error::dim("masked_delta", b.shape(), a.shape()));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let ma = tape.constant(mask_a.binary());
    let mb = tape.constant(mask_b.binary());
    let am = tape.hadamard_along(av, ma, Axis::Rows)?;
    let bm = tape.hadamard_along(bv, mb, Axis::Cols)?;
    let prod = tape.matmul(bm, am)?;
    Ok(tape.value(prod).clone())
}

/// `W0 + scaling·B·A`.
pub fn merge(w0: &Tensor, adapter: &LowRankAdapter) -> Result<Tensor> {
    check_weight(w0, adapter, "merge")?;
    w0.add(&adapter.delta()?)
}

/// `W − scaling·B·A`.
pub fn unmerge(w: &Tensor, adapter: &LowRankAdapter) -> Result<Tensor> {
    check_weight(w, adapter, "unmerge")?;
    w.sub(&adapter.delta()?)
}

fn check_weight(w: &Tensor, adapter: &LowRankAdapter, op: &'static str) -> Result<()> {
    let expected = [adapter.out_features(), adapter.in_features()];
    if w.shape() != expected {
        return Err(Error::dim(op, w.shape(), &expected));
    }
    Ok(())
}
