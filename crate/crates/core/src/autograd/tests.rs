// SPDX-License-Identifier: Apache-2.0

use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Contracts `f(inputs)` with a fixed random tensor and compares every input
/// gradient entry to a central difference.
fn check(inputs: &[Tensor], f: impl Fn(&[Var]) -> Var) {
    let project = |vars: &[Var]| -> Var {
        let y = f(vars);
        let r = Var::constant(rand_t(y.shape(), 999));
        y.mul(&r).sum()
    };
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let loss = project(&vars);
    let grads = loss.backward();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(&vars[k]);
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut u = u.clone();
                        if j == k {
                            u.data_mut()[i] += delta;
                        }
                        Var::constant(u)
                    })
                    .collect();
                project(&vs).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = rand_t(&[2, 3], 1);
    let b = rand_t(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |v| v[0].add(&v[1]));
    check(&[a.clone(), b.clone()], |v| v[0].sub(&v[1]));
    check(&[a.clone(), b.clone()], |v| v[0].mul(&v[1]));
    check(&[a.clone()], |v| v[0].scale(-2.5));
    check(&[a.clone()], |v| v[0].sigmoid());
    check(&[a.clone()], |v| v[0].tanh());
    check(&[a], |v| v[0].elu());
}

#[test]
fn broadcast_ops() {
    let a = rand_t(&[2, 3, 4], 3);
    let b = rand_t(&[1, 3, 1], 4);
    check(&[a.clone(), b.clone()], |v| v[0].add(&v[1]));
    check(&[a.clone(), b.clone()], |v| v[0].sub(&v[1]));
    check(&[a, b], |v| v[0].mul(&v[1]));
}

#[test]
fn shape_ops() {
    let a = rand_t(&[2, 3, 4], 5);
    let b = rand_t(&[2, 2, 4], 6);
    check(&[a.clone()], |v| v[0].mean_axes(&[0, 2]));
    check(&[a.clone()], |v| v[0].reshape(&[6, 4]));
    check(&[a.clone()], |v| v[0].permute(&[2, 0, 1]));
    check(&[a.clone()], |v| v[0].slice(1, 1, 2));
    check(&[a.clone(), b], |v| {
        Var::concat(&[v[0].clone(), v[1].clone()], 1)
    });
    check(&[a], |v| v[0].softmax());
}

#[test]
fn bmm_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_t(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 7);
        let b = rand_t(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 8);
        check(&[a, b], |v| v[0].bmm(&v[1], ta, tb));
    }
    check(&[rand_t(&[3, 2], 9), rand_t(&[2, 4], 10)], |v| {
        v[0].bmm(&v[1], false, false)
    });
}

#[test]
fn conv2d_grads() {
    let x = rand_t(&[2, 4, 5, 7], 11);
    let w = rand_t(&[4, 2, 3, 3], 12);
    let b = rand_t(&[4], 13);
    check(&[x.clone(), w, b.clone()], |v| {
        v[0].conv2d(&v[1], Some(&v[2]), (1, 2), (2, 2), (2, 2), 2)
    });
    let w1 = rand_t(&[4, 4, 1, 1], 14);
    check(&[x, w1, b], |v| {
        v[0].conv2d(&v[1], Some(&v[2]), (1, 1), (0, 0), (1, 1), 1)
    });
}

#[test]
fn conv_transpose_grads_and_shape() {
    let x = rand_t(&[2, 3, 4, 5], 15);
    let w = rand_t(&[3, 2, 3, 3], 16);
    let b = rand_t(&[2], 17);
    let y = Var::constant(x.clone()).conv_transpose2d(
        &Var::constant(w.clone()),
        None,
        (1, 2),
        (1, 1),
        (0, 0),
    );
    assert_eq!(y.shape(), &[2, 2, 4, 9]);
    let y = Var::constant(x.clone()).conv_transpose2d(
        &Var::constant(w.clone()),
        None,
        (1, 2),
        (1, 1),
        (0, 1),
    );
    assert_eq!(y.shape(), &[2, 2, 4, 10]);
    check(&[x.clone(), w.clone(), b.clone()], |v| {
        v[0].conv_transpose2d(&v[1], Some(&v[2]), (1, 2), (1, 1), (0, 0))
    });
    check(&[x, w, b], |v| {
        v[0].conv_transpose2d(&v[1], Some(&v[2]), (1, 2), (1, 1), (0, 1))
    });
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with shared weights (w stored as cout x cin for conv).
    let x = rand_t(&[1, 2, 5, 9], 18);
    let w = rand_t(&[3, 2, 3, 3], 19);
    let y = rand_t(&[1, 3, 5, 5], 20);
    let cx =
        Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), None, (1, 2), (1, 1), (1, 1), 1);
    assert_eq!(cx.shape(), y.shape());
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let ty = Var::constant(y).conv_transpose2d(&Var::constant(w), None, (1, 2), (1, 1), (0, 0));
    let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9);
}

#[test]
fn normalization_grads() {
    let x = rand_t(&[2, 3, 2, 3], 21);
    let g = rand_t(&[3], 22);
    let b = rand_t(&[3], 23);
    check(&[x.clone(), g.clone(), b.clone()], |v| {
        v[0].batch_norm(&v[1], &v[2]).0
    });
    check(&[x.clone(), g.clone(), b.clone()], |v| {
        v[0].channel_layer_norm(&v[1], &v[2])
    });
    check(&[x, g, b], |v| {
        v[0].batch_norm_frozen(&v[1], &v[2], &[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0])
    });
}

#[test]
fn batch_norm_statistics() {
    let x = rand_t(&[3, 2, 4, 4], 24);
    let (y, mean, var) = Var::constant(x).batch_norm(
        &Var::constant(Tensor::full(&[2], 1.0)),
        &Var::constant(Tensor::zeros(&[2])),
    );
    assert_eq!(mean.len(), 2);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| y.data()[(b * 2 + c) * 16..(b * 2 + c + 1) * 16].to_vec())
            .collect();
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - var[c] / (var[c] + NORM_EPS)).abs() < 1e-9);
    }
}

#[test]
fn istft_grad() {
    let plan = Arc::new(StftPlan::new(crate::dsp::StftConfig::new(16, 4, 16).unwrap()).unwrap());
    let len = 40;
    let t = plan.config().n_frames(len);
    let x = rand_t(&[2, 2, t, 9], 25);
    check(&[x], |v| v[0].istft(&plan, len));
}

#[test]
fn custom_scalar_chains() {
    let x = rand_t(&[4], 26);
    check(&[x], |v| {
        let y = v[0].tanh();
        let val: f64 = y.data().iter().map(|a| a * a).sum();
        let grad = y.data().iter().map(|a| 2.0 * a).collect();
        y.custom_scalar(val, grad)
    });
}

#[test]
fn shared_input_accumulates() {
    let a = rand_t(&[3], 27);
    check(&[a], |v| v[0].mul(&v[0]).add(&v[0].sigmoid()));
}

#[test]
fn constants_record_nothing() {
    let a = Var::constant(rand_t(&[3], 28));
    let y = a.sigmoid().add(&a);
    assert!(!y.requires_grad());
    assert!(y.sum().backward().get(&a).is_none());
}

#[test]
fn deep_chain_drops_without_overflow() {
    let mut v = Var::param(Tensor::zeros(&[1]));
    for _ in 0..200_000 {
        v = v.scale(1.0);
    }
    drop(v);
}
