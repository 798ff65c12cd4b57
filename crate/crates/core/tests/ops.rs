mod common;

use common::*;
use cprn::nn::{Ctx, Linear};
use cprn::tape::{gelu, PoolAxis, Tape, Var};
use cprn::{ParameterStore, Tensor};
use proptest::prelude::*;

/// Weighted sum of `out`, so every output element carries its own gradient.
fn probe_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Checks the analytic gradient of a unary graph against central differences.
fn check_unary(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
    let mut tape = Tape::new();
    let probe_shape = {
        let v = tape.constant(x.clone());
        let out = build(&mut tape, v);
        tape.shape(out).to_vec()
    };
    let weights = uniform(&mut rng(99), &probe_shape, -1.0, 1.0);
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let out = build(&mut tape, v);
        let loss = probe_loss(&mut tape, out, &weights);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v);
    let loss = probe_loss(&mut tape, out, &weights);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(v).unwrap().clone();
    let numeric = fd_grad(run, x, 1e-5);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "relative error {err}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let expected = matmul_loop(a.data(), b.data(), 3, 4, 2);
    assert!(close(tape.value(c).data(), &expected, 1e-12));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let x = uniform(&mut rng(2), &[3, 4], -2.0, 2.0);
    for axis in 0..2 {
        check_unary(&x, |t, v| t.softmax(v, axis).unwrap(), 1e-4);
    }
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let v = tape.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
}

#[test]
fn gelu_uses_the_tanh_form() {
    for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
        let expected = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((gelu(x) - expected).abs() < 1e-15);
    }
}

#[test]
fn scalar_function_gradients_match_finite_differences() {
    // Keep relu inputs away from the kink.
    let x = Tensor::from_fn(&[2, 5], |i| if i % 2 == 0 { 0.3 + 0.2 * i as f64 } else { -0.4 - 0.1 * i as f64 });
    check_unary(&x, |t, v| t.gelu(v), 1e-4);
    check_unary(&x, |t, v| t.sigmoid(v), 1e-4);
    check_unary(&x, |t, v| t.relu(v), 1e-6);
}

#[test]
fn linear_matches_per_position_loop() {
    let mut r = rng(3);
    let mut store = ParameterStore::new(0);
    let lin = Linear::register(&mut store, "lin", 3, 2).unwrap();
    let w = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[2], -1.0, 1.0);
    store.set("lin.weight", w.clone()).unwrap();
    store.set("lin.bias", b.clone()).unwrap();
    let x = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
    let mut cx = Ctx::eval(&store);
    let vx = cx.constant(x.clone());
    let y = lin.forward(&mut cx, vx).unwrap();
    let y = cx.tape.value(y);
    assert_eq!(y.shape(), &[2, 2, 2]);
    for i in 0..2 {
        for j in 0..2 {
            for o in 0..2 {
                let expected: f64 = b.at(&[o]) + (0..3).map(|k| x.at(&[i, j, k]) * w.at(&[k, o])).sum::<f64>();
                assert!((y.at(&[i, j, o]) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mean_pool_matches_loop_oracle() {
    let x = uniform(&mut rng(4), &[4, 5, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let rows = tape.mean_pool(v, PoolAxis::Width).unwrap();
    let cols = tape.mean_pool(v, PoolAxis::Height).unwrap();
    for i in 0..4 {
        for c in 0..2 {
            let m = (0..5).map(|j| x.at(&[i, j, c])).sum::<f64>() / 5.0;
            assert!((tape.value(rows).at(&[i, c]) - m).abs() < 1e-12);
        }
    }
    for j in 0..5 {
        for c in 0..2 {
            let m = (0..4).map(|i| x.at(&[i, j, c])).sum::<f64>() / 4.0;
            assert!((tape.value(cols).at(&[j, c]) - m).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_pool_of_row_constants() {
    let x = Tensor::from_fn(&[3, 4, 1], |i| (i / 4) as f64);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let rows = tape.mean_pool(v, PoolAxis::Width).unwrap();
    assert_eq!(tape.value(rows).data(), &[0.0, 1.0, 2.0]);
}

#[test]
fn bilinear_identity_and_degenerate_axis() {
    let x = uniform(&mut rng(5), &[3, 2, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let same = tape.bilinear_resize(v, (3, 2)).unwrap();
    assert_eq!(tape.value(same), &x);

    let col = tape.constant(Tensor::new(&[2, 1, 1], vec![1.5, -2.0]).unwrap());
    let wide = tape.bilinear_resize(col, (2, 4)).unwrap();
    assert_eq!(tape.value(wide).data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
}

#[test]
fn bilinear_two_to_four_closed_form() {
    // Half-pixel centres land at -0.25, 0.25, 0.75, 1.25 in source space.
    let taps = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
    let a = [[1.0, 2.0], [3.0, 5.0]];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
    let up = tape.bilinear_resize(v, (4, 4)).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let mut e = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    e += taps[y][i] * taps[x][j] * a[i][j];
                }
            }
            assert!((tape.value(up).at(&[y, x, 0]) - e).abs() < 1e-12, "({y},{x})");
        }
    }
}

#[test]
fn spatial_op_gradients_match_finite_differences() {
    let x = uniform(&mut rng(6), &[4, 4, 3], -1.0, 1.0);
    check_unary(&x, |t, v| t.bilinear_resize(v, (7, 3)).unwrap(), 1e-5);
    check_unary(&x, |t, v| t.mean_pool(v, PoolAxis::Width).unwrap(), 1e-5);
    check_unary(&x, |t, v| t.mean_pool(v, PoolAxis::Height).unwrap(), 1e-5);
    check_unary(&x, |t, v| t.space_to_depth(v, 2).unwrap(), 1e-5);
    check_unary(&x, |t, v| t.sum_axes(v, &[0, 1]).unwrap(), 1e-5);
    check_unary(&x, |t, v| t.concat(v, v).unwrap(), 1e-5);
}

#[test]
fn layer_norm_values_and_gradients() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let g = uniform(&mut r, &[5], 0.5, 1.5);
    let b = uniform(&mut r, &[5], -0.5, 0.5);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layer_norm(vx, vg, vb).unwrap();
    for i in 0..3 {
        let row: Vec<f64> = (0..5).map(|k| x.at(&[i, k])).collect();
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for k in 0..5 {
            let e = (row[k] - mean) / (var + 1e-5).sqrt() * g.at(&[k]) + b.at(&[k]);
            assert!((tape.value(y).at(&[i, k]) - e).abs() < 1e-12);
        }
    }
    check_unary(&x, |t, v| {
        let (vg, vb) = (t.constant(g.clone()), t.constant(b.clone()));
        t.layer_norm(v, vg, vb).unwrap()
    }, 1e-5);
    check_unary(&g, |t, v| {
        let (vx, vb) = (t.constant(x.clone()), t.constant(b.clone()));
        t.layer_norm(vx, v, vb).unwrap()
    }, 1e-5);
}

#[test]
fn composed_graph_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let w = uniform(&mut r, &[3, 3], -1.0, 1.0);
    let bias = uniform(&mut r, &[3], -0.5, 0.5);
    let target = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
    let build = |t: &mut Tape, v: Var| {
        let (vw, vb) = (t.constant(w.clone()), t.constant(bias.clone()));
        let a = t.affine(v, vw, vb).unwrap();
        let a = t.gelu(a);
        let s = t.softmax(a, 2).unwrap();
        let up = t.bilinear_resize(s, (4, 4)).unwrap();
        let z = t.sum_axes(up, &[2]).unwrap();
        let rows = t.mean_pool(up, PoolAxis::Width).unwrap();
        let rows = t.reshape(rows, &[4, 1, 3]).unwrap();
        let m = t.mul(up, rows).unwrap();
        let q = t.div(m, z).unwrap();
        let q = t.sum_axes(q, &[2]).unwrap();
        let q = t.reshape(q, &[4, 4]).unwrap();
        let p = t.sigmoid(q);
        t.bce(p, &target).unwrap()
    };
    let x = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
    check_unary(&x, build, 1e-5);
}

#[test]
fn sum_and_quadratic_gradients() {
    let x = uniform(&mut rng(9), &[5], -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let col = tape.reshape(v, &[5, 1]).unwrap();
    let row = tape.transpose(col).unwrap();
    let q = tape.matmul(row, col).unwrap();
    let loss = tape.sum(q);
    tape.backward(loss).unwrap();
    let expected = x.map(|v| 2.0 * v);
    assert!(tape.grad(v).unwrap().max_abs_diff(&expected) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(seed in 0u64..10_000, h in 1usize..5, w in 1usize..5, c in 1usize..5, axis in 0usize..3) {
        let x = uniform(&mut rng(seed), &[h, w, c], -30.0, 30.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, axis).unwrap();
        let z = tape.sum_axes(s, &[axis]).unwrap();
        for total in tape.value(z).data() {
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_equals_loop(seed in 0u64..10_000, n in 1usize..6, k in 1usize..6, m in 1usize..6) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[n, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, m], -1.0, 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        prop_assert!(close(tape.value(c).data(), &matmul_loop(a.data(), b.data(), n, k, m), 1e-12));
    }

    #[test]
    fn bilinear_keeps_constants(value in -5.0f64..5.0, h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[h, w, 2], value));
        let out = tape.bilinear_resize(v, (oh, ow)).unwrap();
        for x in tape.value(out).data() {
            prop_assert!((x - value).abs() < 1e-12);
        }
    }
}
