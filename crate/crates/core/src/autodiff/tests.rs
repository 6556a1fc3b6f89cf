use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get2(i, p) * b.get2(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn add_and_exp_examples() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::vector(vec![1.0, 2.0]).unwrap());
    let b = g.constant(&Tensor::vector(vec![3.0, 4.0]).unwrap());
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);

    let z = g.constant(&Tensor::zeros(&[2]));
    let e = g.elementwise(Elementwise::Exp, z, None).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, 1.0]);
}

#[test]
fn log_inverts_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[50]);
    let mut g = Graph::new();
    let v = g.constant(&x);
    let e = g.exp(v).unwrap();
    let l = g.log(e).unwrap();
    assert!(g.value(l).max_abs_diff(&x) < 1e-12);
}

#[test]
fn scalar_broadcast_both_sides() {
    let mut g = Graph::new();
    let a = g.param(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.param(&Tensor::scalar(2.0));
    let prod = g.mul(s, a).unwrap();
    assert_eq!(g.value(prod).data(), &[2.0, 4.0, 6.0]);
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(s).unwrap().data(), &[6.0]);
    assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn elementwise_errors_are_loud() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2]));
    let b = g.constant(&Tensor::zeros(&[3]));
    match g.add(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let neg = g.constant(&Tensor::vector(vec![1.0, -1.0]).unwrap());
    assert!(matches!(g.log(neg), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(g.div(neg, a), Err(Error::Domain { op: "div", .. })));
    let big = g.constant(&Tensor::scalar(1000.0));
    assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
    assert!(g.elementwise(Elementwise::Add, a, None).is_err());
}

#[test]
fn matmul_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[3, 3]);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut g = Graph::new();
    let (va, vi) = (g.constant(&a), g.constant(&eye));
    let p = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(p), &a);

    let r = g.constant(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let c = g.constant(&Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    let a = random_tensor(&mut rng, &[4, 5]);
    let b = random_tensor(&mut rng, &[5, 3]);
    let (va, vb) = (g.constant(&a), g.constant(&b));
    let p = g.matmul(va, vb).unwrap();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in g.value(p).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }

    assert!(matches!(g.matmul(va, va), Err(Error::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(&[2]));
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(&Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let s = g.softmax(x).unwrap();
    for (got, want) in g.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_zeroes_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.param(&random_tensor(&mut rng, &[3, 4]));
    let s = g.masked_softmax(x, &[true, false, true, false]).unwrap();
    for row in g.value(s).data().chunks(4) {
        assert_eq!(row[1], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(g.masked_softmax(x, &[false; 4]).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(&Tensor::full(&[2], 1.0));
    let zeros = g.constant(&Tensor::zeros(&[2]));

    let c = g.constant(&Tensor::full(&[1, 2], 3.5));
    let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let r = g.constant(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(r, ones, zeros, 1e-14).unwrap();
    for (got, want) in g.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((got - want).abs() < 1e-12);
    }

    // direct recomputation of the formula
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 7;
    let x = random_tensor(&mut rng, &[1, d]);
    let gain = random_tensor(&mut rng, &[d]);
    let bias = random_tensor(&mut rng, &[d]);
    let eps = 1e-5;
    let (vx, vg, vb) = (g.constant(&x), g.constant(&gain), g.constant(&bias));
    let y = g.layer_norm(vx, vg, vb, eps).unwrap();
    let mean = x.data().iter().sum::<f64>() / d as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    for j in 0..d {
        let want = (x.data()[j] - mean) / (var + eps).sqrt() * gain.data()[j] + bias.data()[j];
        assert!((g.value(y).data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[6, 16]);
    let mut g = Graph::new();
    let (vx, ones, zeros) = (
        g.constant(&x),
        g.constant(&Tensor::full(&[16], 1.0)),
        g.constant(&Tensor::zeros(&[16])),
    );
    let y = g.layer_norm(vx, ones, zeros, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let mut g = Graph::new();
    let v = g.param(&x);
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let v = g.param(&x);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap();
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let v = g.param(&Tensor::zeros(&[3]));
    assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(s)) if s == vec![3]));
}

#[test]
fn two_consumers_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[5]);

    let grad_of = |use_exp: bool, use_sq: bool| {
        let mut g = Graph::new();
        let v = g.param(&x);
        let mut terms = Vec::new();
        if use_exp {
            let e = g.exp(v).unwrap();
            terms.push(g.sum(e).unwrap());
        }
        if use_sq {
            let s = g.sum_squares(v).unwrap();
            terms.push(g.scale(s, 0.5).unwrap());
        }
        let loss = if terms.len() == 2 {
            g.add(terms[0], terms[1]).unwrap()
        } else {
            terms[0]
        };
        g.backward(loss).unwrap();
        g.grad(v).unwrap()
    };
    let both = grad_of(true, true);
    let a = grad_of(true, false);
    let b = grad_of(false, true);
    for i in 0..5 {
        assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn grad_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[3, 4]);
    let err = grad_check(|g, v| g.sum(v), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
    assert!(grad_check(|g, v| g.sum(v), &x, 1e-2).is_err());
}

/// One randomized trial per op, over 100 seeds each.
#[test]
fn every_op_matches_finite_differences() {
    type Program = Box<dyn Fn(&mut Graph, Var, &Tensor) -> crate::Result<Var>>;
    // constant shaped like `v`, filled from the trial's random weights
    fn like(g: &mut Graph, v: Var, w: &Tensor) -> crate::Result<Var> {
        let shape = g.shape(v).to_vec();
        let n = shape.iter().product();
        Ok(g.constant_owned(Tensor::new(shape, w.data()[..n].to_vec())?))
    }
    let weights = |g: &mut Graph, v: Var, w: &Tensor| {
        // weighted sum so gradients are not all equal
        let c = like(g, v, w)?;
        let p = g.mul(v, c)?;
        g.sum(p)
    };
    let cases: Vec<(&str, Vec<usize>, Program)> = vec![
        ("add", vec![3, 2], Box::new(move |g, v, w| {
            let c = like(g, v, w)?;
            let s = g.add(v, c)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        })),
        ("sub", vec![3, 2], Box::new(move |g, v, w| {
            let c = like(g, v, w)?;
            let s = g.sub(c, v)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        })),
        ("mul", vec![6], Box::new(move |g, v, w| {
            let sq = g.mul(v, v)?;
            weights(g, sq, w)
        })),
        ("div", vec![6], Box::new(move |g, v, w| {
            let e = g.exp(v)?;
            let c = like(g, v, w)?;
            let q = g.div(c, e)?;
            g.sum(q)
        })),
        ("exp", vec![6], Box::new(move |g, v, w| {
            let e = g.exp(v)?;
            weights(g, e, w)
        })),
        ("log", vec![6], Box::new(move |g, v, w| {
            let e = g.exp(v)?;
            let one = g.scalar(1.0);
            let s = g.add(e, one)?;
            let l = g.log(s)?;
            weights(g, l, w)
        })),
        ("relu", vec![6], Box::new(move |g, v, w| {
            let r = g.relu(v)?;
            let sq = g.mul(r, r)?;
            weights(g, sq, w)
        })),
        ("scale", vec![6], Box::new(move |g, v, w| {
            let s = g.scale(v, -1.7)?;
            let sq = g.mul(s, s)?;
            weights(g, sq, w)
        })),
        ("matmul", vec![2, 3], Box::new(move |g, v, w| {
            let wm = Tensor::new(vec![3, 2], w.data()[..6].to_vec())?;
            let c = g.constant(&wm);
            let p = g.matmul(v, c)?;
            let q = g.matmul(c, v)?;
            let ps = g.sum_squares(p)?;
            let qs = g.sum_squares(q)?;
            g.add(ps, qs)
        })),
        ("transpose", vec![2, 3], Box::new(move |g, v, w| {
            let t = g.transpose(v)?;
            let c = g.constant(&Tensor::new(vec![3, 2], w.data()[..6].to_vec())?);
            let p = g.mul(t, c)?;
            let sq = g.mul(p, p)?;
            g.sum(sq)
        })),
        ("add_bias", vec![3], Box::new(move |g, v, w| {
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.add_bias(c, v)?;
            g.sum_squares(p)
        })),
        ("softmax", vec![2, 3], Box::new(move |g, v, w| {
            let s = g.softmax(v)?;
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.mul(s, c)?;
            g.sum(p)
        })),
        ("masked_softmax", vec![2, 3], Box::new(move |g, v, w| {
            let s = g.masked_softmax(v, &[true, false, true])?;
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.mul(s, c)?;
            g.sum(p)
        })),
        ("log_softmax", vec![2, 3], Box::new(move |g, v, w| {
            let s = g.log_softmax(v)?;
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.mul(s, c)?;
            g.sum(p)
        })),
        ("layer_norm", vec![2, 3], Box::new(move |g, v, w| {
            let gain = g.constant(&Tensor::vector(w.data()[..3].to_vec())?);
            let bias = g.constant(&Tensor::vector(w.data()[3..6].to_vec())?);
            let y = g.layer_norm(v, gain, bias, 1e-5)?;
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.mul(y, c)?;
            g.sum(p)
        })),
        ("layer_norm_gain", vec![3], Box::new(move |g, v, w| {
            let x = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let bias = g.constant(&Tensor::zeros(&[3]));
            let y = g.layer_norm(x, v, bias, 1e-5)?;
            let y2 = g.layer_norm(x, bias, v, 1e-5)?;
            let a = g.sum_squares(y)?;
            let b = g.sum_squares(y2)?;
            g.add(a, b)
        })),
        ("gather_rows", vec![3, 2], Box::new(move |g, v, w| {
            let r = g.gather_rows(v, &[2, 0, 2])?;
            let c = g.constant(&Tensor::new(vec![3, 2], w.data()[..6].to_vec())?);
            let p = g.mul(r, c)?;
            g.sum_squares(p)
        })),
        ("block_concat", vec![2, 3], Box::new(move |g, v, w| {
            let left = g.block(v, 0..2, 0..1)?;
            let right = g.block(v, 0..2, 1..3)?;
            let top = g.block(v, 0..1, 0..3)?;
            let cols = g.concat(&[right, left, right], 1)?;
            let rows = g.concat(&[top, v], 0)?;
            let c = g.constant(&Tensor::new(vec![2, 5], w.data()[..10].to_vec())?);
            let p = g.mul(cols, c)?;
            let a = g.sum_squares(p)?;
            let b = g.sum_squares(rows)?;
            g.add(a, b)
        })),
        ("pick", vec![3, 2], Box::new(move |g, v, w| {
            let sq = g.mul(v, v)?;
            let p = g.pick(sq, &[1, 0, 1])?;
            weights(g, p, &Tensor::vector(w.data()[..3].to_vec())?)
        })),
        ("normalize_rows", vec![2, 3], Box::new(move |g, v, w| {
            let n = g.normalize_rows(v)?;
            let c = g.constant(&Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
            let p = g.mul(n, c)?;
            g.sum(p)
        })),
        ("masked_log_sum_exp", vec![2, 3], Box::new(move |g, v, w| {
            let l = g.masked_log_sum_exp(v, &[true, false, true, false, false, false])?;
            let two = g.constant(&Tensor::vector(w.data()[..2].to_vec())?);
            let p = g.mul(l, two)?;
            g.sum(p)
        })),
    ];

    for (name, shape, program) in &cases {
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let x = random_tensor(&mut rng, shape);
            let w = random_tensor(&mut rng, &[10]);
            let err = grad_check(|g, v| program(g, v, &w), &x, 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, &[4, 6]);
        let b = random_tensor(&mut rng, &[6, 6]);
        let mut g = Graph::new();
        let (va, vb) = (g.param(&a), g.param(&b));
        let p = g.matmul(va, vb).unwrap();
        let s = g.softmax(p).unwrap();
        let l = g.sum_squares(s).unwrap();
        g.backward(l).unwrap();
        (g.value(s).clone(), g.grad(va).unwrap(), g.grad(vb).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..4),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::from_rows(&rows).unwrap();
        let shifted = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + shift).collect(),
        ).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(&x), g.constant(&shifted));
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for row in g.value(sa).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }
}
