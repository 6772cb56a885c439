use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::check::{numeric_gradient, relative_error};
use crate::error::Error;

type G = Graph<f64>;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Builds `loss = sum(w * op(x))` with a fixed random weighting, returns the
/// autodiff gradient and the finite-difference gradient w.r.t. `x`.
fn check_unary(x: &Tensor<f64>, seed: u64, op: impl Fn(&mut G, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let probe_shape = {
        let mut g = G::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v);
        g.shape(y).to_vec()
    };
    let w = Tensor::<f64>::randn(probe_shape, 1.0, &mut rng);
    let eval = |x: &Tensor<f64>| {
        let mut g = G::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v);
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p);
        g.value(s).item()
    };
    let mut g = G::new();
    let v = g.leaf(x.clone(), true);
    let y = op(&mut g, v);
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let auto = g.grad(v).unwrap().to_vec();
    let num = numeric_gradient(x, 1e-5, eval);
    relative_error(&auto, &num)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = G::new();
    let i = g.constant(Tensor::eye(2));
    let i2 = g.constant(Tensor::eye(2));
    let out = g.matmul(i, i2).unwrap();
    assert_eq!(g.value(out), &Tensor::eye(2));

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    match &err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![4, 5]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
    let bb = b.clone();
    let err = check_unary(&a, 1, move |g, x| {
        let bv = g.constant(bb.clone());
        g.matmul(x, bv).unwrap()
    });
    assert!(err < 1e-6, "da rel err {err}");
    let aa = a.clone();
    let err = check_unary(&b, 2, move |g, x| {
        let av = g.constant(aa.clone());
        g.matmul(av, x).unwrap()
    });
    assert!(err < 1e-6, "db rel err {err}");
}

#[test]
fn batched_matmul_broadcasts_leading_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
    let mut g = G::new();
    let av = g.constant(a.clone());
    let wv = g.constant(w.clone());
    let c = g.matmul(av, wv).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 2]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.at(&[bi, i, k]) * w.at(&[k, j])).sum();
                assert!((g.value(c).at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
    let ww = w.clone();
    let err = check_unary(&a, 5, move |g, x| {
        let wv = g.constant(ww.clone());
        g.matmul(x, wv).unwrap()
    });
    assert!(err < 1e-6);
    let aa = a.clone();
    let err = check_unary(&w, 6, move |g, x| {
        let av = g.constant(aa.clone());
        g.matmul(av, x).unwrap()
    });
    assert!(err < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut g = G::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x);
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert_eq!(d[0], 1.0);
    assert!(d[1] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = Tensor::<f64>::randn(vec![4, 6], 3.0, &mut rng);
    let x = g.constant(r);
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
    assert!(check_unary(&x, 8, |g, v| g.softmax(v)) < 1e-6);
    let x = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut rng);
    assert!(check_unary(&x, 9, |g, v| g.log_softmax(v)) < 1e-6);
}

#[test]
fn layer_norm_examples() {
    let mut g = G::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let one = g.constant(Tensor::ones(vec![3]));
    let zero = g.constant(Tensor::zeros(vec![3]));
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 3.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-6);

    let beta = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let zg = g.constant(Tensor::zeros(vec![3]));
    let y = g.layer_norm(x, zg, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
    let gamma = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
    let beta = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
    let (g1, b1) = (gamma.clone(), beta.clone());
    let err = check_unary(&x, 11, move |g, v| {
        let gm = g.constant(g1.clone());
        let bt = g.constant(b1.clone());
        g.layer_norm(v, gm, bt, 1e-5).unwrap()
    });
    assert!(err < 1e-5, "dx {err}");
    let (x2, b2) = (x.clone(), beta.clone());
    let err = check_unary(&gamma, 12, move |g, v| {
        let xv = g.constant(x2.clone());
        let bt = g.constant(b2.clone());
        g.layer_norm(xv, v, bt, 1e-5).unwrap()
    });
    assert!(err < 1e-5, "dgamma {err}");
}

#[test]
fn elementwise_values() {
    let mut g = G::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    let ge = g.gelu(z);
    assert_eq!(g.value(s).item(), 0.5);
    assert_eq!(g.value(ge).item(), 0.0);
}

#[test]
fn every_elementwise_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut rng);
    let pos = x.map(|v| v.abs() + 0.5);
    let other = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut rng);
    let row = Tensor::<f64>::randn(vec![3], 1.0, &mut rng);
    let col = Tensor::<f64>::rand_uniform(vec![2, 1], 0.5, 2.0, &mut rng);

    let cases: Vec<(&str, Tensor<f64>, Box<dyn Fn(&mut G, Var) -> Var>)> = vec![
        ("gelu", x.clone(), Box::new(|g, v| g.gelu(v))),
        ("sigmoid", x.clone(), Box::new(|g, v| g.sigmoid(v))),
        ("softplus", x.clone(), Box::new(|g, v| g.softplus(v))),
        ("tanh", x.clone(), Box::new(|g, v| g.tanh(v))),
        ("exp", x.clone(), Box::new(|g, v| g.exp(v))),
        ("log", pos.clone(), Box::new(|g, v| g.log(v))),
        ("powf", pos.clone(), Box::new(|g, v| g.powf(v, -2.0))),
        ("scale", x.clone(), Box::new(|g, v| g.scale(v, 3.0))),
        ("square", x.clone(), Box::new(|g, v| g.square(v))),
        ("mean", x.clone(), Box::new(|g, v| g.mean(v))),
        (
            "mean_axis0",
            x.clone(),
            Box::new(|g, v| g.mean_axis(v, 0).unwrap()),
        ),
        (
            "sum_axis1",
            x.clone(),
            Box::new(|g, v| g.sum_axis(v, 1).unwrap()),
        ),
        (
            "transpose",
            x.clone(),
            Box::new(|g, v| g.transpose(v).unwrap()),
        ),
        (
            "reshape",
            x.clone(),
            Box::new(|g, v| g.reshape(v, vec![3, 2]).unwrap()),
        ),
        (
            "slice",
            x.clone(),
            Box::new(|g, v| g.slice(v, 1, 1, 2).unwrap()),
        ),
        (
            "concat",
            x.clone(),
            Box::new(move |g, v| {
                let s = g.square(v);
                g.concat(&[v, s], 1).unwrap()
            }),
        ),
        ("add_row", x.clone(), {
            let r = row.clone();
            Box::new(move |g, v| {
                let c = g.constant(r.clone());
                g.add(v, c).unwrap()
            })
        }),
        ("mul_other", x.clone(), {
            let o = other.clone();
            Box::new(move |g, v| {
                let c = g.constant(o.clone());
                g.mul(v, c).unwrap()
            })
        }),
        ("sub_col", x.clone(), {
            let c2 = col.clone();
            Box::new(move |g, v| {
                let c = g.constant(c2.clone());
                g.sub(c, v).unwrap()
            })
        }),
        ("div_by_col", x.clone(), {
            let c2 = col.clone();
            Box::new(move |g, v| {
                let c = g.constant(c2.clone());
                g.div(v, c).unwrap()
            })
        }),
        ("col_div_by_x", pos.clone(), {
            let c2 = col.clone();
            Box::new(move |g, v| {
                let c = g.constant(c2.clone());
                g.div(c, v).unwrap()
            })
        }),
    ];
    for (name, input, op) in cases {
        let err = check_unary(&input, 14, |g, v| op(g, v));
        assert!(err < 1e-5, "{name}: rel err {err}");
    }
    // broadcast operand receives the reduced gradient
    let xx = x.clone();
    let err = check_unary(&col, 15, move |g, c| {
        let v = g.constant(xx.clone());
        g.mul(v, c).unwrap()
    });
    assert!(err < 1e-5, "broadcast operand {err}");
}

#[test]
fn rfft_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for n in [6usize, 8] {
        let x = Tensor::<f64>::randn(vec![2, n], 1.0, &mut rng);
        let err = check_unary(&x, 17, |g, v| g.rfft(v).unwrap().0);
        assert!(err < 1e-6, "re n={n} {err}");
        let err = check_unary(&x, 18, |g, v| g.rfft(v).unwrap().1);
        assert!(err < 1e-6, "im n={n} {err}");
        let err = check_unary(&x, 19, move |g, v| {
            let (r, i) = g.rfft(v).unwrap();
            let r2 = g.scale(r, 0.7);
            g.irfft(r2, i, n).unwrap()
        });
        assert!(err < 1e-6, "irfft n={n} {err}");
    }
}

#[test]
fn rfft_round_trip_through_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Tensor::<f64>::randn(vec![8], 1.0, &mut rng);
    let mut g = G::new();
    let v = g.constant(x.clone());
    let (r, i) = g.rfft(v).unwrap();
    assert_eq!(g.shape(r), &[5]);
    let back = g.irfft(r, i, 8).unwrap();
    assert!(g.value(back).max_abs_diff(&x) < 1e-9);
    assert!(g.irfft(r, i, 11).is_err());
}

#[test]
fn backward_examples() {
    let mut g = G::new();
    let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

    let mut g = G::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let sq = g.square(x);
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, -2.0, 3.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = G::new();
    let x = g.leaf(Tensor::<f64>::ones(vec![2]), true);
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn frozen_leaves_get_no_gradient_and_accumulation_is_additive() {
    let mut g = G::new();
    let w = g.leaf(Tensor::<f64>::ones(vec![2, 2]), false);
    let x = g.leaf(Tensor::<f64>::ones(vec![1, 2]), true);
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn two_layer_mlp_full_jacobian_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
    let w1 = Tensor::<f64>::randn(vec![3, 5], 0.7, &mut rng);
    let b1 = Tensor::<f64>::randn(vec![5], 0.1, &mut rng);
    let w2 = Tensor::<f64>::randn(vec![5, 2], 0.7, &mut rng);
    let run = |g: &mut G, w1v: Var| {
        let xv = g.constant(x.clone());
        let b = g.constant(b1.clone());
        let w2v = g.constant(w2.clone());
        let h = g.matmul(xv, w1v).unwrap();
        let h = g.add(h, b).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, w2v).unwrap();
        let o = g.square(o);
        g.mean(o)
    };
    let mut g = G::new();
    let wv = g.leaf(w1.clone(), true);
    let loss = run(&mut g, wv);
    g.backward(loss).unwrap();
    let auto = g.grad(wv).unwrap().to_vec();
    let num = numeric_gradient(&w1, 1e-5, |w| {
        let mut g = G::new();
        let v = g.constant(w.clone());
        let l = run(&mut g, v);
        g.value(l).item()
    });
    assert!(relative_error(&auto, &num) < 1e-5);
}

#[test]
fn dropout_is_identity_at_zero_and_masks_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut g = G::new();
    let x = g.leaf(Tensor::<f64>::ones(vec![1000]), true);
    assert_eq!(g.dropout(x, 0.0, &mut rng), x);
    let y = g.dropout(x, 0.5, &mut rng);
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!((350..650).contains(&zeros));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn forward_values_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut g = G::new();
    let x = g.constant(Tensor::<f64>::randn(vec![3, 4], 50.0, &mut rng));
    let s = g.softmax(x);
    let ls = g.log_softmax(x);
    let sp = g.softplus(x);
    let sg = g.sigmoid(x);
    for v in [s, ls, sp, sg] {
        assert!(g.value(v).is_finite());
    }
}
