use proptest::prelude::*;
use rand::Rng;

use super::gradcheck::{check_fn, GRAD_TOL};
use super::*;
use crate::error::MktError;
use crate::rng::stream;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut stream(seed, "numerics-test"))
}

/// Scalar readout `Σ w ⊙ y` with fixed random weights, so every output
/// entry carries a distinct upstream gradient.
fn readout(g: &mut Graph<'_>, y: Var, seed: u64) -> crate::Result<Var> {
    let w = randn(g.shape(y), seed ^ 0xabcd);
    let wv = g.constant(&w);
    let shape = g.shape(y).to_vec();
    let flat_y = g.reshape(y, &[1, shape.iter().product()])?;
    let flat_w = g.reshape(wv, &[shape.iter().product(), 1])?;
    let s = g.matmul(flat_y, flat_w)?;
    g.sum(s)
}

#[test]
fn matmul_identity_and_selector() {
    let mut g = Graph::new();
    let i2 = Tensor::eye(2);
    let m = t(&[2, 2], &[1., 2., 3., 4.]);
    let (a, b) = (g.constant(&i2), g.constant(&m));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[1., 2., 3., 4.]);

    let sel = t(&[2, 2], &[1., 0., 0., 0.]);
    let m2 = t(&[2, 2], &[5., 6., 7., 8.]);
    let (a, b) = (g.constant(&sel), g.constant(&m2));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[5., 6., 0., 0.]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(MktError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_tight() {
    for seed in 0..20 {
        let a = randn(&[3, 4], seed);
        let b = randn(&[4, 2], seed + 100);
        let r = check_fn(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            readout(g, c, seed)
        })
        .unwrap();
        // Bilinear: central differences are exact up to rounding.
        assert!(r.max_rel_err() <= 1e-6, "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 2], &[0., 0.]));
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(&t(&[1, 2], &[1000., 0.]));
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y)[0], 1.0);
    assert!(g.value(y)[1] >= 0.0 && g.value(y)[1] < 1e-300);
}

#[test]
fn softmax_gradient() {
    for seed in 0..20 {
        let r = check_fn(&[randn(&[2, 3], seed)], |g, v| {
            let y = g.softmax_rows(v[0])?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 4], &[3., 3., 3., 3.]));
    let gain = g.constant(&Tensor::ones(&[4]));
    let bias = g.constant(&Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y), &[0., 0., 0., 0.]);

    let x = g.constant(&t(&[2, 3], &[1., -2., 5., 0.3, 0.1, 9.]));
    let gain = g.constant(&Tensor::zeros(&[3]));
    let bias_t = t(&[3], &[0.5, -1., 2.]);
    let bias = g.constant(&bias_t);
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y), &[0.5, -1., 2., 0.5, -1., 2.]);

    let bad = g.constant(&Tensor::ones(&[2]));
    assert!(g.layer_norm(x, bad, bias).is_err());
}

#[test]
fn layer_norm_gradient() {
    for seed in 0..20 {
        let x = randn(&[3, 5], seed);
        let gain = randn(&[5], seed + 1);
        let bias = randn(&[5], seed + 2);
        let r = check_fn(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
    assert!(gelu_scalar(-10.0).abs() < 1e-12);
}

#[test]
fn gelu_gradient_at_fixed_points() {
    let x = t(&[4], &[-2.0, -0.1, 0.3, 4.0]);
    let r = check_fn(&[x], |g, v| {
        let y = g.gelu(v[0])?;
        readout(g, y, 3)
    })
    .unwrap();
    assert!(r.passed(GRAD_TOL), "{:?}", r.worst());
    for seed in 0..20 {
        let r = check_fn(&[randn(&[6], seed)], |g, v| {
            let y = g.gelu(v[0])?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn topk_mean_examples() {
    let mut g = Graph::new();
    let v = g.constant(&t(&[3], &[0.2, 0.9, 0.5]));
    let m = g.topk_mean(v, 1).unwrap();
    assert_eq!(g.item(m), 0.9);

    let v = g.constant(&t(&[3], &[1., 2., 3.]));
    let m = g.topk_mean(v, 3).unwrap();
    assert_eq!(g.item(m), 2.0);

    // Sort-descending oracle: 0.4, 0.3 | 0.2, 0.1.
    let v = g.constant(&t(&[4], &[0.1, 0.4, 0.3, 0.2]));
    let m = g.topk_mean(v, 2).unwrap();
    assert!((g.item(m) - 0.35).abs() < 1e-15);

    assert!(matches!(g.topk_mean(v, 0), Err(MktError::KOutOfRange { .. })));
    assert!(matches!(g.topk_mean(v, 5), Err(MktError::KOutOfRange { .. })));
}

#[test]
fn topk_ties_go_to_lower_index() {
    let p = vec![t(&[4], &[1.0, 2.0, 1.0, 1.0]).with_requires_grad(true)];
    let mut g = Graph::new();
    let v = g.param(&p[0]);
    let m = g.topk_mean(v, 2).unwrap();
    g.backward(m).unwrap();
    assert_eq!(p[0].grad().unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn topk_gradient() {
    for seed in 0..20 {
        let r = check_fn(&[randn(&[3, 7], seed)], |g, v| {
            let y = g.topk_mean_rows(v[0], 3)?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn backward_errors() {
    let p = Tensor::ones(&[2]).with_requires_grad(true);
    let mut g = Graph::new();
    let v = g.param(&p);
    assert!(matches!(g.backward(v), Err(MktError::NotScalar(_))));
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(MktError::DoubleBackward)));
}

#[test]
fn unused_leaf_gets_zero_grad_and_frozen_gets_none() {
    let used = Tensor::ones(&[2]).with_requires_grad(true);
    let unused = Tensor::ones(&[3]).with_requires_grad(true);
    let frozen = Tensor::ones(&[2]);
    let mut g = Graph::new();
    let a = g.param(&used);
    let _ = g.param(&unused);
    let f = g.param(&frozen);
    let s = g.add(a, f).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert_eq!(used.grad().unwrap(), vec![1.0, 1.0]);
    assert_eq!(unused.grad().unwrap(), vec![0.0; 3]);
    assert!(frozen.grad().is_none());
}

#[test]
fn structural_ops_gradient() {
    for seed in 0..20 {
        let a = randn(&[2, 3], seed);
        let b = randn(&[1, 3], seed + 1);
        let c = randn(&[2, 2], seed + 2);
        let bias = randn(&[5], seed + 3);
        let r = check_fn(&[a, b, c, bias], |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?; // 3x3
            let top = g.slice_rows(rows, 1, 3)?; // 2x3
            let wide = g.concat_cols(&[top, v[2]])?; // 2x5
            let biased = g.add_bias(wide, v[3])?;
            let tr = g.transpose(biased)?; // 5x2
            let sc = g.scale(tr, 0.7)?;
            let m = g.mean_of(&[sc, sc])?;
            readout(g, m, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn loss_ops_gradient() {
    for seed in 0..20 {
        let x = randn(&[6], seed);
        let target = randn(&[6], seed + 50);
        let positive = [true, false, false, true, false, false];
        let r = check_fn(&[x.clone()], |g, v| {
            let h = g.pairwise_hinge(v[0], &positive)?;
            let l = g.l1_distance(v[0], target.data())?;
            let s = g.add(h, l)?;
            let m = g.mean(v[0])?;
            g.add(s, m)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());

        let r = check_fn(&[randn(&[3, 4], seed)], |g, v| {
            let y = g.l2_normalize_rows(v[0])?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(&randn(&[4, 6], 9));
        let w = g.constant(&randn(&[6, 6], 10));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let y = g.gelu(y).unwrap();
        g.tensor(y).fingerprint()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..8, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, cols], spread, &mut stream(seed, "p"));
        let mut g = Graph::new();
        let v = g.constant(&x);
        let y = g.softmax_rows(v).unwrap();
        for row in g.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn topk_full_is_mean(n in 1usize..30, seed in any::<u64>()) {
        let x = Tensor::randn(&[n], 1.0, &mut stream(seed, "p"));
        let mut g = Graph::new();
        let v = g.constant(&x);
        let a = g.topk_mean(v, n).unwrap();
        let b = g.mean(v).unwrap();
        prop_assert_eq!(g.item(a), g.item(b));
    }

    #[test]
    fn topk_grad_has_k_entries_summing_to_one(n in 1usize..20, seed in any::<u64>()) {
        let mut rng = stream(seed, "p");
        let k = rng.random_range(1..=n);
        let p = Tensor::randn(&[n], 1.0, &mut rng).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.param(&p);
        let m = g.topk_mean(v, k).unwrap();
        g.backward(m).unwrap();
        let grad = p.grad().unwrap();
        prop_assert_eq!(grad.iter().filter(|&&x| x != 0.0).count(), k);
        prop_assert!((grad.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
