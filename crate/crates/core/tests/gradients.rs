//! Finite-difference checks of every differentiable tape op.

use droplora::autodiff::{Axis, Tape, Var};
use droplora::rng;
use droplora::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;

type Graph = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output entry contributes a distinct sensitivity.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::randn(
        &shape,
        1.0,
        &mut rng::stream(seed, &[rng::tag("projection")]),
    );
    let wv = tape.constant(w);
    let p = tape.hadamard(out, wv).unwrap();
    tape.sum(p).unwrap()
}

fn loss_at(graph: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars);
    tape.value(out).item()
}

fn check(graph: &Graph, inputs: Vec<Tensor>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).expect("gradient for every param").clone();
        let mut fd = Vec::with_capacity(g.numel());
        for k in 0..g.numel() {
            let bump = |d: f64| {
                let mut xs = inputs.clone();
                let mut data = xs[i].data().to_vec();
                data[k] += d;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), data).unwrap();
                loss_at(graph, &xs)
            };
            fd.push((bump(H) - bump(-H)) / (2.0 * H));
        }
        let fd = Tensor::new(g.shape().to_vec(), fd).unwrap();
        let scale = g.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
        worst = worst.max(g.sub(&fd).unwrap().frobenius_norm() / scale);
    }
    worst
}

fn randn(shape: &[usize], seed: u64, label: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, &[rng::tag(label)]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_transpose_add_sub_scale(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let g = move |t: &mut Tape, v: &[Var]| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let q = t.transpose(v[2]).unwrap();
            let s = t.add(p, q).unwrap();
            let d = t.sub(s, v[3]).unwrap();
            let o = t.scale(d, -1.7).unwrap();
            project(t, o, seed)
        };
        let inputs = vec![
            randn(&[m, k], seed, "a"),
            randn(&[k, n], seed, "b"),
            randn(&[n, m], seed, "c"),
            randn(&[m, n], seed, "d"),
        ];
        prop_assert!(check(&g, inputs) < 1e-6);
    }

    #[test]
    fn hadamard_variants(seed in any::<u64>(), m in 2usize..5, n in 3usize..6) {
        let g = move |t: &mut Tape, v: &[Var]| {
            let same = t.hadamard(v[0], v[1]).unwrap();
            let rows = t.hadamard_along(same, v[2], Axis::Rows).unwrap();
            let cols = t.hadamard_along(rows, v[3], Axis::Cols).unwrap();
            project(t, cols, seed)
        };
        let inputs = vec![
            randn(&[m, n], seed, "a"),
            randn(&[m, n], seed, "b"),
            randn(&[m], seed, "r"),
            randn(&[n], seed, "c"),
        ];
        prop_assert!(check(&g, inputs) < 1e-6);
    }

    #[test]
    fn silu_and_mean_square(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let g = |t: &mut Tape, v: &[Var]| {
            let s = t.silu(v[0]).unwrap();
            t.mean_square(s).unwrap()
        };
        prop_assert!(check(&g, vec![randn(&[m, n], seed, "x")]) < 1e-6);
    }

    #[test]
    fn causal_softmax(seed in any::<u64>(), n in 1usize..6) {
        let g = move |t: &mut Tape, v: &[Var]| {
            let p = t.causal_softmax(v[0]).unwrap();
            project(t, p, seed)
        };
        prop_assert!(check(&g, vec![randn(&[n, n], seed, "s")]) < 1e-6);
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), d in 3usize..7, n in 1usize..4) {
        let gamma = randn(&[d], seed, "gamma").into_data();
        let beta = randn(&[d], seed, "beta").into_data();
        let g = move |t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], &gamma, &beta, 1e-5).unwrap();
            project(t, y, seed)
        };
        prop_assert!(check(&g, vec![randn(&[d, n], seed, "x")]) < 1e-6);
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), batch in 1usize..5, classes in 2usize..5) {
        let mut r = rng::stream(seed, &[rng::tag("labels")]);
        let labels: Vec<usize> = (0..batch).map(|_| rand::Rng::random_range(&mut r, 0..classes)).collect();
        let g = move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels).unwrap();
        prop_assert!(check(&g, vec![randn(&[batch, classes], seed, "logits")]) < 1e-6);
    }

    #[test]
    fn mse_through_composition(seed in any::<u64>(), n in 1usize..5) {
        let target = randn(&[n, n], seed, "target");
        let g = move |t: &mut Tape, v: &[Var]| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let s = t.silu(p).unwrap();
            t.mse(s, &target).unwrap()
        };
        let inputs = vec![randn(&[n, n], seed, "a"), randn(&[n, n], seed, "b")];
        prop_assert!(check(&g, inputs) < 1e-6);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}
