use std::sync::Arc;

use afs_core::tensor::{Graph, Primitive, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut gk = Vec::new();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            gk.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push(gk);
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks the analytic gradient of `sum(w * build(inputs))` against finite
/// differences, with `w` a fixed random weighting.
fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: Vec<Tensor>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let weights = rand_tensor(&mut rng, &probe);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let root = g.sum(prod).unwrap();
    let grads = g.backward(root).unwrap();
    let numeric = numeric_grad(&eval, &inputs, 1e-5);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric[k]).enumerate() {
            assert!(rel_err(a, n) <= 1e-4, "input {k} elem {i}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn matmul_identity_example() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn softmax_and_sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(x).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let z = g.constant(Tensor::scalar(0.0));
    let sg = g.sigmoid(z).unwrap();
    assert_eq!(g.value(sg).item(), 0.5);
}

#[test]
fn backward_simple_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_primitive_and_extents() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            primitive: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn gradients_sum_over_multiple_uses() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let a = g.scale(x, 2.0).unwrap();
    let b = g.mul(x, x).unwrap();
    let c = g.add(a, b).unwrap();
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[8.0]);
}

#[test]
fn finite_differences_per_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    check(|g, v| g.matmul(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[4, 2])], 1);
    check(|g, v| g.matmul_nt(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[5, 4])], 2);
    check(|g, v| g.transpose(v[0]).unwrap(), vec![r(&[3, 4])], 3);
    check(|g, v| g.add(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[3, 4])], 4);
    check(|g, v| g.add(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[4])], 5);
    check(|g, v| g.sub(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[3, 1])], 6);
    check(|g, v| g.mul(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[3, 4])], 7);
    check(|g, v| g.mul(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[4])], 8);
    check(|g, v| g.mul(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[3, 1])], 9);
    check(|g, v| g.mul(v[0], v[1]).unwrap(), vec![r(&[3, 4]), r(&[])], 10);
    check(|g, v| g.scale(v[0], -1.7).unwrap(), vec![r(&[5])], 11);
    check(|g, v| g.add_scalar(v[0], 0.3).unwrap(), vec![r(&[5])], 12);
    check(|g, v| g.exp(v[0]).unwrap(), vec![r(&[2, 3])], 13);
    check(
        |g, v| {
            let e = g.exp(v[0]).unwrap();
            g.log(e).unwrap()
        },
        vec![r(&[2, 3])],
        14,
    );
    check(|g, v| g.sigmoid(v[0]).unwrap(), vec![r(&[2, 3])], 15);
    check(|g, v| g.tanh(v[0]).unwrap(), vec![r(&[2, 3])], 16);
    check(|g, v| g.softmax(v[0]).unwrap(), vec![r(&[3, 5])], 17);
    check(|g, v| g.log_softmax(v[0]).unwrap(), vec![r(&[3, 5])], 18);
    check(
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        vec![r(&[3, 6]), r(&[6]), r(&[6])],
        19,
    );
    let mask = Arc::new(vec![0.0, 1.25, 1.25, 0.0, 1.25, 1.25]);
    check(move |g, v| g.dropout(v[0], mask.clone()).unwrap(), vec![r(&[2, 3])], 20);
    check(|g, v| g.gather_rows(v[0], vec![2, 0, 2]).unwrap(), vec![r(&[3, 4])], 21);
    check(
        |g, v| g.concat(&[v[0], v[1]], 0).unwrap(),
        vec![r(&[2, 3]), r(&[1, 3])],
        22,
    );
    check(
        |g, v| g.concat(&[v[0], v[1]], 1).unwrap(),
        vec![r(&[2, 3]), r(&[2, 2])],
        23,
    );
    check(|g, v| g.slice(v[0], 1, 1, 2).unwrap(), vec![r(&[3, 4])], 24);
    check(|g, v| g.slice(v[0], 0, 1, 2).unwrap(), vec![r(&[3, 4])], 25);
    check(|g, v| g.reshape(v[0], vec![4, 3]).unwrap(), vec![r(&[3, 4])], 26);
    check(|g, v| g.sum(v[0]).unwrap(), vec![r(&[3, 4])], 27);
    check(|g, v| g.mean(v[0]).unwrap(), vec![r(&[3, 4])], 28);
    check(|g, v| g.sum_axis(v[0], 0).unwrap(), vec![r(&[3, 4])], 29);
    check(|g, v| g.mean_axis(v[0], 1).unwrap(), vec![r(&[3, 4])], 30);
    check(|g, v| g.relu(v[0]).unwrap(), vec![r(&[3, 4])], 31);
}

#[test]
fn clamp_gradient_is_indicator_of_active_interval() {
    let xs = [-1.5, -0.2, 0.0, 0.4, 0.999, 1.0, 1.3];
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(xs.to_vec()), true);
    let c = g.clamp(x, 0.0, 1.0).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    for (&x, &d) in xs.iter().zip(grads.get(x).unwrap()) {
        let want = if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
        assert_eq!(d, want, "x = {x}");
    }
    // away from the kinks finite differences agree
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor::vector(
        (0..20)
            .map(|_| {
                let v: f64 = rng.random_range(-2.0..2.0);
                if v.abs() < 0.01 || (v - 1.0).abs() < 0.01 {
                    0.5
                } else {
                    v
                }
            })
            .collect(),
    );
    check(|g, v| g.clamp(v[0], 0.0, 1.0).unwrap(), vec![t], 40);
}

#[test]
fn composite_expression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let gain = rand_tensor(&mut rng, &[3]);
    let bias = rand_tensor(&mut rng, &[3]);
    check(
        |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.tanh(h).unwrap();
            let h = g.layer_norm(h, v[2], v[3], 1e-6).unwrap();
            let s = g.matmul_nt(h, v[0]).unwrap();
            let p = g.softmax(s).unwrap();
            g.matmul(p, v[0]).unwrap()
        },
        vec![x, w, gain, bias],
        7,
    );
}

#[test]
fn apply_checks_arity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(1.0));
    assert!(g.apply(Primitive::MatMul, &[a]).is_err());
    assert!(g.apply(Primitive::Concat { axis: 0 }, &[]).is_err());
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let h = g.matmul(xv, wv).unwrap();
        let p = g.softmax(h).unwrap();
        let s = g.sum(p).unwrap();
        let l = g.log(s).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(p).data().to_vec(), grads.get(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let s = g.softmax(x).unwrap();
        let out = g.value(s);
        for r in 0..3 {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn clamp_gradient_pointwise(x in -3.0f64..3.0) {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::scalar(x), true);
        let c = g.clamp(v, -1.0, 1.0).unwrap();
        let grads = g.backward(c).unwrap();
        let want = if (-1.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
        prop_assert_eq!(grads.get(v).unwrap()[0], want);
    }
}
