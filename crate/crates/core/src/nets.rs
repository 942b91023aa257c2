//! Host networks with adapter attachment points: a single linear probe, a
//! two-layer MLP classifier, and a one-head transformer block.
//!
//! Every projection is an [`AdaptedLinear`]: a frozen `W0` plus an optional
//! adapter. A model lists its projections in a fixed order through
//! [`Model::layers`]; a [`Pass`] carries one entry per projection in that
//! same order.

use sha2::{Digest, Sha256};

use crate::adapters::{
    forward_droplora, forward_lora, init_adapter, merge, AdapterConfig, AdapterVars,
    LowRankAdapter, Mode, RankMask,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Frozen weight with an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    name: &'static str,
    w0: Tensor,
    adapter: Option<LowRankAdapter>,
}

/// Per-projection randomness for one training forward.
#[derive(Debug, Clone, Default)]
pub struct LayerNoise {
    pub rank_mask: Option<RankMask>,
    pub input_mask: Option<Tensor>,
}

impl AdaptedLinear {
    pub fn new(name: &'static str, w0: Tensor) -> Result<Self> {
        w0.dims2("AdaptedLinear")?;
        Ok(Self {
            name,
            w0,
            adapter: None,
        })
    }

    /// `N(0, 1/in)` initialized `out×in` weight.
    pub fn random(name: &'static str, out: usize, inp: usize, rng: &mut Rng) -> Self {
        let w0 = Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng);
        Self {
            name,
            w0,
            adapter: None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn base(&self) -> &Tensor {
        &self.w0
    }

    /// Replaces the frozen weight, e.g. with merged weights loaded from disk.
    /// Only allowed when no adapter is attached.
    pub fn set_base(&mut self, w: Tensor) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::contract(format!(
                "cannot replace the base of {} while an adapter is attached",
                self.name
            )));
        }
        if w.shape() != self.w0.shape() {
            return Err(Error::dim("set_base", self.w0.shape(), w.shape()));
        }
        self.w0 = w;
        Ok(())
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LowRankAdapter> {
        self.adapter.as_mut()
    }

    pub fn set_adapter(&mut self, adapter: Option<LowRankAdapter>) -> Result<()> {
        if let Some(ad) = &adapter {
            let expected = [ad.out_features(), ad.in_features()];
            if self.w0.shape() != expected {
                return Err(Error::dim("set_adapter", self.w0.shape(), &expected));
            }
        }
        self.adapter = adapter;
        Ok(())
    }

    /// Folds the adapter into `W0` and drops it.
    pub fn merge_adapter(&mut self) -> Result<()> {
        if let Some(ad) = self.adapter.take() {
            self.w0 = merge(&self.w0, &ad)?;
        }
        Ok(())
    }

    fn draw_noise(&mut self, cols: usize) -> Result<LayerNoise> {
        let Some(ad) = self.adapter.as_mut() else {
            return Ok(LayerNoise::default());
        };
        let rank_mask = ad.step_mask()?.cloned();
        let input_mask = ad.draw_input_mask(&[ad.in_features(), cols]);
        Ok(LayerNoise {
            rank_mask,
            input_mask,
        })
    }

    /// `W0·x` plus the adapter branch. Without `noise` the branch runs with
    /// eval semantics.
    pub fn apply(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: Option<AdapterVars>,
        noise: Option<&LayerNoise>,
    ) -> Result<Var> {
        let w0 = tape.constant(self.w0.clone());
        let Some(ad) = &self.adapter else {
            return tape.matmul(w0, x);
        };
        let vars = vars.ok_or_else(|| {
            Error::contract(format!("adapter on {} has no tape binding", self.name))
        })?;
        match noise {
            Some(LayerNoise {
                rank_mask: Some(mask),
                input_mask,
            }) => forward_droplora(tape, x, w0, ad, vars, mask, input_mask.as_ref()),
            Some(LayerNoise {
                rank_mask: None,
                input_mask,
            }) => forward_lora(tape, x, w0, ad, vars, input_mask.as_ref()),
            None => forward_lora(tape, x, w0, ad, vars, None),
        }
    }
}

/// Tape bindings and (in training) noise for one forward, indexed like
/// [`Model::layers`].
#[derive(Debug, Clone)]
pub struct Pass {
    vars: Vec<Option<AdapterVars>>,
    noise: Option<Vec<LayerNoise>>,
}

impl Pass {
    /// Registers adapter factors and draws this forward's input-dropout
    /// masks. Rank masks are those already drawn for the current step.
    pub fn train<M: Model + ?Sized>(model: &mut M, tape: &mut Tape, cols: usize) -> Result<Self> {
        let vars = bind(&*model, tape);
        let noise = model
            .layers_mut()
            .into_iter()
            .map(|l| l.draw_noise(cols))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            noise: Some(noise),
        })
    }

    /// Eval-semantics pass: no masks, no dropout, no randomness consumed.
    pub fn eval<M: Model + ?Sized>(model: &M, tape: &mut Tape) -> Self {
        Self {
            vars: bind(model, tape),
            noise: None,
        }
    }

    /// Adapter bindings, aligned with [`Model::layers`].
    pub fn vars(&self) -> &[Option<AdapterVars>] {
        &self.vars
    }

    pub fn noise(&self) -> Option<&[LayerNoise]> {
        self.noise.as_deref()
    }

    pub(crate) fn layer(&self, idx: usize) -> (Option<AdapterVars>, Option<&LayerNoise>) {
        (
            self.vars.get(idx).copied().flatten(),
            self.noise.as_ref().and_then(|n| n.get(idx)),
        )
    }
}

fn bind<M: Model + ?Sized>(model: &M, tape: &mut Tape) -> Vec<Option<AdapterVars>> {
    model
        .layers()
        .into_iter()
        .map(|l| l.adapter().map(|ad| ad.vars(tape)))
        .collect()
}

/// A network whose projections can carry adapters.
pub trait Model {
    /// Projections in a fixed order.
    fn layers(&self) -> Vec<&AdaptedLinear>;

    fn layers_mut(&mut self) -> Vec<&mut AdaptedLinear>;

    /// Names accepted as adapter targets.
    fn valid_targets(&self) -> &'static [&'static str];

    /// Frozen parameters outside the projections (normalization, etc.).
    fn extra_frozen(&self) -> Vec<&[f64]> {
        Vec::new()
    }

    /// Forward for an input whose columns are samples (or tokens).
    fn run(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<Var>;

    fn adapters(&self) -> Vec<(&'static str, &LowRankAdapter)> {
        self.layers()
            .into_iter()
            .filter_map(|l| l.adapter().map(|a| (l.name(), a)))
            .collect()
    }

    fn set_mode(&mut self, mode: Mode) {
        for l in self.layers_mut() {
            if let Some(ad) = l.adapter_mut() {
                ad.set_mode(mode);
            }
        }
    }

    /// Draws one fresh rank mask per adapter.
    fn resample_masks(&mut self) -> Result<()> {
        for l in self.layers_mut() {
            if let Some(ad) = l.adapter_mut() {
                ad.resample_mask()?;
            }
        }
        Ok(())
    }

    fn trainable_params(&self) -> usize {
        self.adapters()
            .iter()
            .map(|(_, a)| a.trainable_params())
            .sum()
    }

    /// SHA-256 over every frozen value.
    fn base_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in self.layers() {
            h.update(l.name().as_bytes());
            for v in l.base().data() {
                h.update(v.to_le_bytes());
            }
        }
        for block in self.extra_frozen() {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Folds every adapter into its projection.
    fn merge_adapters(&mut self) -> Result<()> {
        for l in self.layers_mut() {
            l.merge_adapter()?;
        }
        Ok(())
    }
}

/// Wraps each projection named in `config.targets` with a fresh adapter.
///
/// Each target's adapter is seeded from `config.seed` and the target name,
/// so streams are distinct per projection and independent of attach order.
pub fn attach_adapters<M: Model + ?Sized>(model: &mut M, config: &AdapterConfig) -> Result<()> {
    config.validate()?;
    let valid = model.valid_targets();
    if let Some(bad) = config.targets.iter().find(|t| !valid.contains(&t.as_str())) {
        return Err(Error::config(format!(
            "unknown target {bad:?}; valid targets are {}",
            valid.join(", ")
        )));
    }
    for layer in model.layers_mut() {
        if !config.targets.iter().any(|t| t == layer.name()) {
            continue;
        }
        let (m, n) = layer.base().dims2("attach")?;
        let mut stream = rng::stream(config.seed, &[rng::tag("adapter"), rng::tag(layer.name())]);
        let ad = init_adapter(config, m, n, &mut stream)?;
        layer.set_adapter(Some(ad))?;
    }
    Ok(())
}

/// Output of a model forward together with its pass.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    pub pass: Pass,
}

/// Training forward: adapters in train mode apply their step mask and draw
/// input dropout.
pub fn forward_train<M: Model + ?Sized>(
    model: &mut M,
    tape: &mut Tape,
    x: &Tensor,
) -> Result<Forward> {
    let pass = Pass::train(model, tape, x.cols())?;
    let xv = tape.constant(x.clone());
    let output = model.run(tape, xv, &pass)?;
    Ok(Forward { output, pass })
}

/// Eval-semantics forward; consumes no randomness.
pub fn forward_eval<M: Model + ?Sized>(model: &M, tape: &mut Tape, x: &Tensor) -> Result<Forward> {
    let pass = Pass::eval(model, tape);
    let xv = tape.constant(x.clone());
    let output = model.run(tape, xv, &pass)?;
    Ok(Forward { output, pass })
}

/// One frozen `m×n` projection.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    layer: AdaptedLinear,
}

impl LinearProbe {
    pub fn new(w0: Tensor) -> Result<Self> {
        Ok(Self {
            layer: AdaptedLinear::new("W", w0)?,
        })
    }

    pub fn layer(&self) -> &AdaptedLinear {
        &self.layer
    }

    pub fn layer_mut(&mut self) -> &mut AdaptedLinear {
        &mut self.layer
    }
}

impl Model for LinearProbe {
    fn layers(&self) -> Vec<&AdaptedLinear> {
        vec![&self.layer]
    }

    fn layers_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        vec![&mut self.layer]
    }

    fn valid_targets(&self) -> &'static [&'static str] {
        &["W"]
    }

    fn run(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<Var> {
        let (vars, noise) = pass.layer(0);
        self.layer.apply(tape, x, vars, noise)
    }
}

/// `Down · silu(Up · x)`; outputs are `classes×batch` logits.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    up: AdaptedLinear,
    down: AdaptedLinear,
}

impl MlpClassifier {
    pub fn new(inputs: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            up: AdaptedLinear::random("Up", hidden, inputs, rng),
            down: AdaptedLinear::random("Down", classes, hidden, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.down.base().rows()
    }
}

impl Model for MlpClassifier {
    fn layers(&self) -> Vec<&AdaptedLinear> {
        vec![&self.up, &self.down]
    }

    fn layers_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        vec![&mut self.up, &mut self.down]
    }

    fn valid_targets(&self) -> &'static [&'static str] {
        &["Up", "Down"]
    }

    fn run(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<Var> {
        let (v0, n0) = pass.layer(0);
        let (v1, n1) = pass.layer(1);
        let h = self.up.apply(tape, x, v0, n0)?;
        let h = tape.silu(h)?;
        self.down.apply(tape, h, v1, n1)
    }
}

const LN_EPS: f64 = 1e-5;

/// Pre-norm single-head causal self-attention followed by a SiLU MLP, both
/// with residual connections. Inputs are `d×tokens`.
#[derive(Debug, Clone)]
pub struct TinyTransformerBlock {
    d: usize,
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: AdaptedLinear,
    up: AdaptedLinear,
    down: AdaptedLinear,
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
}

/// Block output plus the attention matrix (`tokens×tokens`, rows are
/// queries).
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub output: Var,
    pub attention: Var,
}

impl TinyTransformerBlock {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        let h = 4 * d;
        Self {
            d,
            q: AdaptedLinear::random("Q", d, d, rng),
            k: AdaptedLinear::random("K", d, d, rng),
            v: AdaptedLinear::random("V", d, d, rng),
            o: AdaptedLinear::random("O", d, d, rng),
            up: AdaptedLinear::random("Up", h, d, rng),
            down: AdaptedLinear::random("Down", d, h, rng),
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Forward that also exposes the attention weights.
    pub fn forward_block(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<BlockOutput> {
        let xs = tape.value(x);
        let (d, _) = xs.dims2("forward_block")?;
        if d != self.d {
            return Err(Error::dim("forward_block", xs.shape(), &[self.d, 0]));
        }
        let proj = |tape: &mut Tape, idx: usize, layer: &AdaptedLinear, input: Var| {
            let (vars, noise) = pass.layer(idx);
            layer.apply(tape, input, vars, noise)
        };

        let n1 = tape.layer_norm(x, &self.ln1_gamma, &self.ln1_beta, LN_EPS)?;
        let q = proj(tape, 0, &self.q, n1)?;
        let k = proj(tape, 1, &self.k, n1)?;
        let v = proj(tape, 2, &self.v, n1)?;
        let qt = tape.transpose(q)?;
        let scores = tape.matmul(qt, k)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let attention = tape.causal_softmax(scores)?;
        let pt = tape.transpose(attention)?;
        let mixed = tape.matmul(v, pt)?;
        let attn_out = proj(tape, 3, &self.o, mixed)?;
        let h = tape.add(x, attn_out)?;

        let n2 = tape.layer_norm(h, &self.ln2_gamma, &self.ln2_beta, LN_EPS)?;
        let u = proj(tape, 4, &self.up, n2)?;
        let u = tape.silu(u)?;
        let dn = proj(tape, 5, &self.down, u)?;
        let output = tape.add(h, dn)?;
        Ok(BlockOutput { output, attention })
    }
}

impl Model for TinyTransformerBlock {
    fn layers(&self) -> Vec<&AdaptedLinear> {
        vec![&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn layers_mut(&mut self) -> Vec<&mut AdaptedLinear> {
        vec![
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.up,
            &mut self.down,
        ]
    }

    fn valid_targets(&self) -> &'static [&'static str] {
        &crate::adapters::TRANSFORMER_TARGETS
    }

    fn extra_frozen(&self) -> Vec<&[f64]> {
        vec![
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn run(&self, tape: &mut Tape, x: Var, pass: &Pass) -> Result<Var> {
        Ok(self.forward_block(tape, x, pass)?.output)
    }
}
