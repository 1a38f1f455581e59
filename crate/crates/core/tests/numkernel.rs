use props_core::numkernel::gradcheck::{self, rel_err};
use props_core::numkernel::{AttnMask, Graph, Tensor};
use props_core::{rng, Error};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 2.0, &mut rng::stream(seed, &[shape.len() as u64]))
}

/// Naive triple-loop product.
fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

/// Double-loop attention written independently of the fused kernel.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Vec<Vec<f64>> {
    (0..q.rows())
        .map(|i| {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| scale * q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v.cols())
                .map(|c| (0..v.rows()).map(|j| e[j] / z * v.at(j, c)).sum())
                .collect()
        })
        .collect()
}

#[test]
fn matmul_identity_and_hand_case() {
    let x = rand_tensor(&[2, 5], 1);
    let eye = Tensor::eye(2);
    let mut g = Graph::new();
    let (a, b) = (g.frozen(&eye), g.frozen(&x));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y), x.data());

    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.frozen(&a), g.frozen(&b));
    let y = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(y), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 5]);
    let mut g = Graph::new();
    let (va, vb) = (g.frozen(&a), g.frozen(&b));
    let err = g.matmul(va, vb).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_matches_naive_and_fd() {
    let a = rand_tensor(&[5, 7], 11);
    let b = rand_tensor(&[7, 3], 12);
    let mut g = Graph::new();
    let (va, vb) = (g.frozen(&a), g.frozen(&b));
    let y = g.matmul(va, vb).unwrap();
    for (x, e) in g.value(y).iter().zip(naive_matmul(&a, &b)) {
        assert!((x - e).abs() < 1e-12);
    }
    let rep = gradcheck::check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        },
        &[a, b],
        None,
        0,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn softmax_examples() {
    let x = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
    let mut g = Graph::new();
    let vx = g.frozen(&x);
    let y = g.softmax(vx, 0).unwrap();
    for &p in g.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let vx = g.frozen(&x);
    let y = g.softmax(vx, 0).unwrap();
    assert_eq!(g.value(y)[0], 1.0);
    assert_eq!(g.value(y)[1], 0.0);
}

#[test]
fn softmax_over_inner_axis() {
    let x = rand_tensor(&[3, 4, 2], 5);
    let mut g = Graph::new();
    let vx = g.frozen(&x);
    let y = g.softmax(vx, 1).unwrap();
    let yv = g.value(y);
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..4).map(|a| yv[(o * 4 + a) * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::filled(&[3], 1.0);
    let zeros = Tensor::zeros(&[3]);
    let c = Tensor::filled(&[1, 3], 4.2);
    let mut g = Graph::new();
    let (x, gn, b) = (g.frozen(&c), g.frozen(&ones), g.frozen(&zeros));
    let y = g.layer_norm(x, gn, b).unwrap();
    assert!(g.value(y).iter().all(|v| *v == 0.0));

    let ones = Tensor::filled(&[2], 1.0);
    let zeros = Tensor::zeros(&[2]);
    let r = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let mut g = Graph::new();
    let (x, gn, b) = (g.frozen(&r), g.frozen(&ones), g.frozen(&zeros));
    let y = g.layer_norm(x, gn, b).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y)[0] - expect).abs() < 1e-15);
    assert!((g.value(y)[1] + expect).abs() < 1e-15);
    assert!((expect - 0.999995).abs() < 1e-6);
}

#[test]
fn attention_examples() {
    let q = rand_tensor(&[3, 4], 1);
    let k = rand_tensor(&[1, 4], 2);
    let v = rand_tensor(&[1, 6], 3);
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.frozen(&q), g.frozen(&k), g.frozen(&v));
    let out = g.attention(vq, vk, vv, 0.5).unwrap();
    for i in 0..3 {
        assert_eq!(&g.value(out)[i * 6..(i + 1) * 6], v.data());
    }

    let krow = rand_tensor(&[1, 4], 4).into_data();
    let k2 = Tensor::new(vec![2, 4], [krow.clone(), krow].concat()).unwrap();
    let v2 = rand_tensor(&[2, 3], 5);
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.frozen(&q), g.frozen(&k2), g.frozen(&v2));
    let out = g.attention(vq, vk, vv, 0.5).unwrap();
    for i in 0..3 {
        for c in 0..3 {
            let mean = (v2.at(0, c) + v2.at(1, c)) / 2.0;
            assert!((g.value(out)[i * 3 + c] - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_matches_double_loop_oracle() {
    for seed in 0..10 {
        let q = rand_tensor(&[4, 6], 100 + seed);
        let k = rand_tensor(&[5, 6], 200 + seed);
        let v = rand_tensor(&[5, 3], 300 + seed);
        let scale = 1.0 / 6f64.sqrt();
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.frozen(&q), g.frozen(&k), g.frozen(&v));
        let out = g.attention(vq, vk, vv, scale).unwrap();
        let oracle = naive_attention(&q, &k, &v, scale);
        for i in 0..4 {
            for c in 0..3 {
                assert!((g.value(out)[i * 3 + c] - oracle[i][c]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attention_with_zero_keys_is_an_error() {
    let mut g = Graph::new();
    let q = g.input(&[2, 4], vec![0.0; 8], false).unwrap();
    let k = g.input(&[2, 4], vec![0.0; 8], false).unwrap();
    let v = g.input(&[2, 4], vec![0.0; 8], false).unwrap();
    let mask = AttnMask::keys(vec![true, true]);
    assert!(g.attention_ext(q, k, v, None, 1, 1.0, &mask).is_ok());
    let err = g.attention_ext(q, k, v, None, 3, 1.0, &AttnMask::none()).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn backward_examples() {
    let x = rand_tensor(&[3, 4], 9).with_grad();
    let mut g = Graph::new();
    let vx = g.param(&x);
    let s = g.sum(vx).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(vx).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let vx = g.param(&x);
    let sq = g.mul(vx, vx).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    for (gv, xv) in grads.get(vx).unwrap().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }

    let mut g = Graph::new();
    let vx = g.param(&x);
    assert!(matches!(g.backward(vx), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_into_tensor_grad() {
    let mut x = rand_tensor(&[2, 2], 1).with_grad();
    let snapshot = x.clone();
    for _ in 0..2 {
        let mut g = Graph::new();
        let vx = g.param(&snapshot);
        let s = g.sum(vx).unwrap();
        let grads = g.backward(s).unwrap();
        grads.accumulate_into(vx, &mut x).unwrap();
    }
    assert_eq!(x.grad.as_deref().unwrap(), &[2.0; 4]);
}

#[test]
fn shared_subexpressions_accumulate_like_duplicated_nodes() {
    let a = rand_tensor(&[3, 3], 21).with_grad();
    let b = rand_tensor(&[3, 3], 22).with_grad();
    // shared: h = a·b used twice
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a), g.param(&b));
    let h = g.matmul(va, vb).unwrap();
    let t = g.tanh(h).unwrap();
    let p = g.mul(h, t).unwrap();
    let s = g.sum(p).unwrap();
    let shared = g.backward(s).unwrap();
    let ga = shared.get(va).unwrap().to_vec();

    // duplicated: the product is recomputed for each use
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a), g.param(&b));
    let h1 = g.matmul(va, vb).unwrap();
    let h2 = g.matmul(va, vb).unwrap();
    let t = g.tanh(h2).unwrap();
    let p = g.mul(h1, t).unwrap();
    let s = g.sum(p).unwrap();
    let dup = g.backward(s).unwrap();
    for (x, y) in ga.iter().zip(dup.get(va).unwrap()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn non_finite_values_are_reported_when_checking() {
    let x = Tensor::new(vec![2], vec![1.0, f64::MAX]).unwrap();
    let mut g = Graph::new().with_finite_check(true);
    let vx = g.frozen(&x);
    assert!(matches!(g.scale(vx, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn every_op_passes_finite_differences_over_twenty_trials() {
    for (name, worst) in gradcheck::check_ops(20).unwrap() {
        assert!(worst < 1e-4, "{name}: max rel err {worst}");
    }
    assert!(gradcheck::op_cases().len() >= 17);
}

#[test]
fn rel_err_uses_floor() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let mut g = Graph::new();
        let vx = g.frozen(&x);
        let y = g.softmax(vx, 1).unwrap();
        for r in g.value(y).chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|p| *p >= 0.0 && *p <= 1.0));
        }
    }

    #[test]
    fn attention_output_is_convex_combination_of_values(seed in 0u64..10_000) {
        let q = rand_tensor(&[3, 4], seed);
        let k = rand_tensor(&[6, 4], seed + 1);
        let v = rand_tensor(&[6, 5], seed + 2);
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.frozen(&q), g.frozen(&k), g.frozen(&v));
        let out = g.attention(vq, vk, vv, 1.0).unwrap();
        for c in 0..5 {
            let col: Vec<f64> = (0..6).map(|j| v.at(j, c)).collect();
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            for i in 0..3 {
                let o = g.value(out)[i * 5 + c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}
