//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and the rule needed to push gradients back
//! to its inputs; inputs always precede their consumers, so a single reverse
//! sweep over the node list is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::{finite, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis a length-`r` vector indexes when broadcast against a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// `out[i, j] = a[i, j] * v[i]`
    Rows,
    /// `out[i, j] = a[i, j] * v[j]`
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Along(Axis),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var, Broadcast),
    Silu(Var),
    CausalSoftmax(Var),
    LayerNorm {
        input: Var,
        gamma: Vec<f64>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquare(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves created with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    ///
    /// `None` when `v` does not require gradients or the loss does not
    /// depend on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Scale(a, s)))
    }

    /// Elementwise product.
    ///
    /// `b` may have the same shape as `a`, or be a vector whose length
    /// matches exactly one axis of matrix `a`. A vector that matches both
    /// axes of a square matrix is ambiguous; use [`Tape::hadamard_along`].
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return self.hadamard_with(a, b, Broadcast::Same);
        }
        match (sa, sb) {
            ([r, c], [len]) if r == len && c != len => self.hadamard_along(a, b, Axis::Rows),
            ([r, c], [len]) if c == len && r != len => self.hadamard_along(a, b, Axis::Cols),
            _ => Err(Error::dim("hadamard", sa, sb)),
        }
    }

    pub fn hadamard_along(&mut self, a: Var, b: Var, axis: Axis) -> Result<Var> {
        self.hadamard_with(a, b, Broadcast::Along(axis))
    }

    fn hadamard_with(&mut self, a: Var, b: Var, bc: Broadcast) -> Result<Var> {
        let out = hadamard_forward(self.value(a), self.value(b), bc)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Hadamard(a, b, bc)))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = finite(self.value(a).map(|x| x * sigmoid(x)), "silu")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Silu(a)))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let s = self.value(scores);
        let (t, t2) = s.dims2("causal_softmax")?;
        if t != t2 {
            return Err(Error::dim("causal_softmax", s.shape(), &[t, t]));
        }
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &s.data()[i * t..i * t + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.into_iter().enumerate() {
                out[i * t + j] = e / z;
            }
        }
        let out = finite(Tensor::from_parts(vec![t, t], out), "causal_softmax")?;
        let rg = self.any_grad(&[scores]);
        Ok(self.push(out, rg, Op::CausalSoftmax(scores)))
    }

    /// Normalizes each column of a `d×tokens` matrix over its `d` features,
    /// then applies the frozen affine `gamma[i] * x̂ + beta[i]`.
    pub fn layer_norm(&mut self, a: Var, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (d, t) = x.dims2("layer_norm")?;
        if gamma.len() != d || beta.len() != d {
            return Err(Error::dim(
                "layer_norm",
                x.shape(),
                &[gamma.len(), beta.len()],
            ));
        }
        let mut xhat = vec![0.0; d * t];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; d * t];
        for j in 0..t {
            let col = |i: usize| x.data()[i * t + j];
            let mean = (0..d).map(col).sum::<f64>() / d as f64;
            let var = (0..d).map(|i| (col(i) - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..d {
                let h = (col(i) - mean) * is;
                xhat[i * t + j] = h;
                out[i * t + j] = gamma[i] * h + beta[i];
            }
        }
        let out = finite(Tensor::from_parts(vec![d, t], out), "layer_norm")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                input: a,
                gamma: gamma.to_vec(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of a
    /// `batch×classes` logit matrix.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (b, c) = z.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", z.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z.data()[row * c..(row + 1) * c];
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - zr[label];
            for (j, &v) in zr.iter().enumerate() {
                probs[row * c + j] = (v - lse).exp();
            }
        }
        let out = finite(
            Tensor::from_parts(vec![], vec![total / b as f64]),
            "cross_entropy",
        )?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel().max(1) as f64;
        let out = finite(Tensor::from_parts(vec![], vec![v]), "mean_square")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::MeanSquare(a)))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, prediction: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let diff = self.sub(prediction, t)?;
        self.mean_square(diff)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = finite(Tensor::from_parts(vec![], vec![self.value(a).sum()]), "sum")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Sum(a)))
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// recorded value that requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose()?)?));
                }
                if want(*b) {
                    out.push((*b, self.value(*a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if want(*b) {
                    out.push((*b, g.scale(-1.0)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s)?)),
            Op::Hadamard(a, b, bc) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    out.push((*a, hadamard_forward(g, vb, *bc)?));
                }
                if want(*b) {
                    let ga = g.mul(va)?;
                    let db = match bc {
                        Broadcast::Same => ga,
                        Broadcast::Along(axis) => reduce_along(&ga, *axis)?,
                    };
                    out.push((*b, db));
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                out.push((*a, d.mul(g)?));
            }
            Op::CausalSoftmax(s) => {
                let p = &node.value;
                let t = p.rows();
                let mut ds = vec![0.0; t * t];
                for i in 0..t {
                    let pr = &p.data()[i * t..(i + 1) * t];
                    let gr = &g.data()[i * t..(i + 1) * t];
                    let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..=i {
                        ds[i * t + j] = pr[j] * (gr[j] - dot);
                    }
                }
                out.push((*s, Tensor::from_parts(vec![t, t], ds)));
            }
            Op::LayerNorm {
                input,
                gamma,
                xhat,
                inv_std,
            } => {
                let (d, t) = node.value.dims2("layer_norm")?;
                let mut dx = vec![0.0; d * t];
                for j in 0..t {
                    let dxhat = |i: usize| g.data()[i * t + j] * gamma[i];
                    let mean_d = (0..d).map(dxhat).sum::<f64>() / d as f64;
                    let mean_dx =
                        (0..d).map(|i| dxhat(i) * xhat[i * t + j]).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[i * t + j] =
                            inv_std[j] * (dxhat(i) - mean_d - xhat[i * t + j] * mean_dx);
                    }
                }
                out.push((*input, Tensor::from_parts(vec![d, t], dx)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let z = self.value(*logits);
                let (b, c) = z.dims2("cross_entropy")?;
                let scale = g.item() / b as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    dz[row * c + label] -= scale;
                }
                out.push((*logits, Tensor::from_parts(vec![b, c], dz)));
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a);
                let k = 2.0 * g.item() / x.numel().max(1) as f64;
                out.push((*a, x.map(|v| k * v)));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                out.push((*a, Tensor::full(x.shape(), g.item())));
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hadamard_forward(a: &Tensor, b: &Tensor, bc: Broadcast) -> Result<Tensor> {
    match bc {
        Broadcast::Same => a.mul(b),
        Broadcast::Along(axis) => {
            let (r, c) = a.dims2("hadamard")?;
            let want = match axis {
                Axis::Rows => r,
                Axis::Cols => c,
            };
            if b.shape() != [want] {
                return Err(Error::dim("hadamard", a.shape(), b.shape()));
            }
            let v = b.data();
            let mut out = a.data().to_vec();
            for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x *= match axis {
                        Axis::Rows => v[i],
                        Axis::Cols => v[j],
                    };
                }
            }
            finite(Tensor::from_parts(vec![r, c], out), "hadamard")
        }
    }
}

/// Sums a matrix down to the vector indexed by `axis`.
fn reduce_along(m: &Tensor, axis: Axis) -> Result<Tensor> {
    let (r, c) = m.dims2("hadamard")?;
    let mut out = vec![0.0; if axis == Axis::Rows { r } else { c }];
    for i in 0..r {
        for j in 0..c {
            let idx = if axis == Axis::Rows { i } else { j };
            out[idx] += m.data()[i * c + j];
        }
    }
    let n = out.len();
    Ok(Tensor::from_parts(vec![n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let w = tape.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let zc = tape.matmul(z, w).unwrap();
        assert_eq!(tape.value(zc), &Tensor::zeros(&[2, 3]));

        let row = tape.constant(m(&[&[1.0, 2.0]]));
        let col = tape.constant(m(&[&[3.0], &[4.0]]));
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);

        assert!(matches!(
            tape.matmul(col, col),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn hadamard_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let ones = tape.constant(Tensor::vector(vec![1.0; 3]).unwrap());
        let mask = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap());
        let a = tape.hadamard(x, ones).unwrap();
        let b = tape.hadamard(x, mask).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(b).data(), &[0.0, 2.0, 0.0]);

        let mat = tape.constant(m(&[&[1.0, 1.0, 1.0], &[4.0, 4.0, 4.0]]));
        let scale = tape.constant(Tensor::vector(vec![2.0, 0.0]).unwrap());
        let rows = tape.hadamard(mat, scale).unwrap();
        assert_eq!(tape.value(rows).data(), &[2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0; 5]).unwrap());
        assert!(tape.hadamard(mat, bad).is_err());
        let square = tape.constant(Tensor::identity(2));
        assert!(tape.hadamard(square, scale).is_err());
        assert!(tape.hadamard_along(square, scale, Axis::Cols).is_ok());
    }

    #[test]
    fn backward_of_linear_sum() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.0, 1.0]]));
        let x = tape.constant(Tensor::column(vec![2.0, 3.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 3.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn zero_scaled_loss_has_zero_grads() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.5, -2.0], &[0.5, 3.0]]));
        let y = tape.silu(w).unwrap();
        let s = tape.sum(y).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::identity(2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_have_no_grad() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::identity(2));
        let unused = tape.param(Tensor::identity(2));
        let loss = tape.sum(used).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(uniform, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        let confident = tape.constant(m(&[&[100.0, 0.0, 0.0], &[0.0, 0.0, 100.0]]));
        let loss = tape.cross_entropy(confident, &[0, 2]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);

        assert!(matches!(
            tape.cross_entropy(confident, &[0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn causal_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[1.0, 9.0, 9.0], &[0.5, -0.5, 9.0], &[3.0, 2.0, 1.0]]));
        let p = tape.causal_softmax(s).unwrap();
        let p = tape.value(p);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| p.at(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in i + 1..3 {
                assert_eq!(p.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn matmul_is_linear_in_scalar() {
        let a = m(&[&[0.3, -1.2], &[2.5, 0.7]]);
        let b = m(&[&[1.1, 0.4, -0.6], &[0.9, -2.2, 1.3]]);
        let s = 0.5;
        let lhs = a.matmul(&b.scale(s).unwrap()).unwrap();
        let rhs = a.matmul(&b).unwrap().scale(s).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }
}
