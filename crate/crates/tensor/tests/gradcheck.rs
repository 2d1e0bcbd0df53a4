//! Central finite-difference checks for every differentiable primitive.

use mvd_tensor::{attention, concat, Graph, Mask, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Relative error between analytic and numeric gradients of
/// `sum(f(inputs) * weights)` w.r.t. every input.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).shape()
    };
    let weights = random(&probe_shape, &mut rng);
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out, &weights).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient");
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            num += (a - fd) * (a - fd);
            den += a * a + fd * fd;
        }
        let rel = if den == 0.0 { 0.0 } else { num.sqrt() / den.sqrt() };
        worst = worst.max(rel);
    }
    worst
}

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..=max_rank)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let err = check(&[a, b], |_, v| v[0].matmul(v[1]).unwrap());
    assert!(err < 1e-6, "rel err {err}");

    let a = random(&[2, 3, 3, 4], &mut rng);
    let b = random(&[3, 4, 2], &mut rng);
    let err = check(&[a, b], |_, v| v[0].matmul(v[1]).unwrap());
    assert!(err < 1e-6, "batched rel err {err}");
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    for axis in 0..2 {
        let err = check(std::slice::from_ref(&x), |_, v| v[0].softmax(axis).unwrap());
        assert!(err < 1e-6, "axis {axis}: rel err {err}");
    }
    let keep: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    let err = check(&[x], |_, v| v[0].masked_softmax(1, &keep).unwrap());
    assert!(err < 1e-6, "masked rel err {err}");
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 6], &mut rng);
    let gain = random(&[6], &mut rng);
    let bias = random(&[6], &mut rng);
    let err = check(&[x.clone(), gain, bias], |_, v| {
        v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");

    let g = Graph::new();
    let y = g.constant(x).layer_norm(None, None, 1e-5).unwrap().value();
    for row in y.data().chunks(6) {
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[2, 3, 4], &mut rng);
    let k = random(&[2, 5, 4], &mut rng);
    let v = random(&[2, 5, 3], &mut rng);
    let mask = Mask::new(&[5], vec![true, false, true, true, false]).unwrap();
    let err = check(&[q, k, v], |_, x| attention(x[0], x[1], x[2], Some(&mask)).unwrap());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn rope_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 6], &mut rng);
    let err = check(&[x], |_, v| v[0].rope(&[0, 3, 7], 10_000.0).unwrap());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn composite_mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[5, 4], &mut rng);
    let w1 = random(&[4, 8], &mut rng);
    let b1 = random(&[8], &mut rng);
    let w2 = random(&[8, 3], &mut rng);
    let err = check(&[x, w1, b1, w2], |_, v| {
        let h = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap().gelu();
        h.matmul(v[3]).unwrap().tanh().square().mean_all()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 1, 4], &mut rng);
    let t = random(&[5, 3], &mut rng);
    let err = check(&[a.clone(), b], |_, v| {
        let c = concat(&[v[0], v[1]], 1).unwrap();
        let p = c.permute(&[2, 0, 1]).unwrap().reshape(&[4, 8]).unwrap();
        p.narrow(1, 2, 7).unwrap().sum_axis(0).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
    let err = check(&[t], |_, v| v[0].select_rows(&[4, 0, 4, 2]).unwrap());
    assert!(err < 1e-6, "select rel err {err}");
    let err = check(&[a], |_, v| {
        v[0].broadcast_to(&[3, 2, 3, 4]).unwrap().transpose(0, 3).unwrap()
    });
    assert!(err < 1e-6, "broadcast rel err {err}");
}

#[test]
fn rope_relative_position_property() {
    // dot(rope(q, m), rope(k, n)) depends only on m - n.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random(&[1, 4], &mut rng);
    let k = random(&[1, 4], &mut rng);
    let dot_at = |m: usize, n: usize| -> f64 {
        let g = Graph::new();
        let rq = g.constant(q.clone()).rope(&[m], 100.0).unwrap().value();
        let rk = g.constant(k.clone()).rope(&[n], 100.0).unwrap().value();
        rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum()
    };
    for delta in -7i64..8 {
        let mut values = vec![];
        for m in 0..8i64 {
            let n = m - delta;
            if (0..8).contains(&n) {
                values.push(dot_at(m as usize, n as usize));
            }
        }
        for v in &values {
            assert!((v - values[0]).abs() < 1e-12, "delta {delta}: {values:?}");
        }
    }
    let g = Graph::new();
    let x = g.constant(q.clone());
    assert_eq!(*x.rope(&[0], 10_000.0).unwrap().value(), q);
}

/// Three-loop reference attention.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, keep: &[bool]) -> Vec<f64> {
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let (lk, dv) = (k.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let mut scores = vec![f64::NEG_INFINITY; lk];
        for j in 0..lk {
            if keep[j] {
                scores[j] = (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>()
                    / (d as f64).sqrt();
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..lk {
            for c in 0..dv {
                out[i * dv + c] += w[j] / total * v.data()[j * dv + c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&[4, 6], &mut rng);
    let k = random(&[7, 6], &mut rng);
    let v = random(&[7, 3], &mut rng);
    let keep: Vec<bool> = (0..7).map(|j| j != 2 && j != 5).collect();
    let g = Graph::new();
    let mask = Mask::new(&[7], keep.clone()).unwrap();
    let out = attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), Some(&mask))
        .unwrap()
        .value();
    let reference = naive_attention(&q, &k, &v, &keep);
    for (a, b) in out.data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_primitives_pass_finite_differences(shape in shape_strategy(5), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&shape, &mut rng);
        let b = random(&shape, &mut rng).map(|x| x.abs() + 0.5);
        let err = check(&[a.clone(), b.clone()], |_, v| {
            let s = v[0].add(v[1]).unwrap().mul(v[0]).unwrap().sub(v[1]).unwrap();
            s.div(v[1]).unwrap().exp().scale(0.5)
        });
        prop_assert!(err < 1e-4, "arith rel err {err}");
        let err = check(std::slice::from_ref(&a), |_, v| v[0].sigmoid().add(v[0].gelu()).unwrap());
        prop_assert!(err < 1e-4, "activation rel err {err}");
        let err = check(&[b], |_, v| v[0].sqrt().add(v[0].ln()).unwrap());
        prop_assert!(err < 1e-4, "sqrt/ln rel err {err}");
        let axis = seed as usize % shape.len();
        let err = check(&[a], |_, v| v[0].mean_axis(axis).unwrap().square());
        prop_assert!(err < 1e-4, "reduce rel err {err}");
    }

    #[test]
    fn broadcast_binary_passes_finite_differences(shape in shape_strategy(4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&shape, &mut rng);
        // trailing suffix with one axis collapsed to 1
        let mut tail: Vec<usize> = shape[shape.len() / 2..].to_vec();
        tail[0] = 1;
        let b = random(&tail, &mut rng);
        let err = check(&[a, b], |_, v| v[0].mul(v[1]).unwrap().add(v[1]).unwrap());
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(shape in shape_strategy(4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng).map(|v| v * 30.0);
        let g = Graph::new();
        let last = shape.len() - 1;
        let y = g.constant(x).softmax(last).unwrap().value();
        for row in y.data().chunks(shape[last]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_norms(len in 1usize..6, half in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[len, 2 * half], &mut rng);
        let positions: Vec<usize> = (0..len).map(|i| i * 3 + seed as usize % 11).collect();
        let g = Graph::new();
        let y = g.constant(x.clone()).rope(&positions, 10_000.0).unwrap().value();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            prop_assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn primitives_are_bitwise_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let run = || {
            let g = Graph::new();
            let y = g.param(a.clone()).matmul(g.param(b.clone())).unwrap().softmax(1).unwrap();
            let y = y.layer_norm(None, None, 1e-6).unwrap().gelu();
            let loss = y.square().mean_all();
            let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
            let _ = &grads;
            (*y.value()).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
