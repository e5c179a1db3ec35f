use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn g(shape: &[usize], values: &[f64]) -> Grid<f64> {
    Grid::from_f64(shape, values).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Grid<f64> {
    Grid::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero (for divisors, logs, ReLU kinks).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Grid<f64> {
    Grid::from_fn(shape, |_| {
        let m = rng.random_range(0.3..2.0);
        if positive || rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn conv_of_ones_is_nine() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(Grid::ones(&[1, 1, 4, 4]));
    let w = t.constant(Grid::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn identity_kernel_leaves_input_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&mut rng, &[2, 3, 5, 4]);
    let mut kernel = Grid::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        kernel.data_mut()[c * 3 + c] = 1.0;
    }
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(input.clone());
    let w = t.constant(kernel);
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_output_size_follows_floor_rule() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(Grid::zeros(&[1, 2, 9, 7]));
    let w = t.constant(Grid::zeros(&[4, 2, 3, 3]));
    let y = t.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 4, 5, 4]);
}

#[test]
fn conv_shape_mismatch_names_primitive() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(Grid::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Grid::zeros(&[4, 3, 3, 3]));
    let err = t.conv2d(x, w, None, 1, 0).unwrap_err();
    assert!(err.to_string().contains("conv2d"), "{err}");
    assert!(err.to_string().contains('3'), "{err}");
}

#[test]
fn l2_normalize_three_four_five() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(g(&[2], &[3.0, 4.0]));
    let y = t.l2_normalize(x, 0.0).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(g(&[1], &[-1.0]));
    assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn square_has_gradient_six_at_three() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[1], &[3.0]));
    let y = t.mul(x, x).unwrap();
    let grads = t.backward_scalar(y).unwrap();
    assert_eq!(grads[&ParamId(0)].item(), 6.0);
}

#[test]
fn log_exp_has_unit_gradient() {
    for &x0 in &[-3.0, 0.0, 0.7, 5.0] {
        let mut t = Tape::<f64>::new();
        let x = t.param(ParamId(0), &g(&[1], &[x0]));
        let e = t.exp(x).unwrap();
        let y = t.log(e).unwrap();
        let grads = t.backward_scalar(y).unwrap();
        assert!((grads[&ParamId(0)].item() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[3], &[-1.0, 0.0, 2.0]));
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    let grads = t.backward_scalar(s).unwrap();
    assert_eq!(grads[&ParamId(0)].data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[2], &[1.0, 2.0]));
    let _unused = t.param(ParamId(1), &g(&[2, 2], &[1.0; 4]));
    let y = t.sum(x).unwrap();
    let grads = t.backward_scalar(y).unwrap();
    assert_eq!(grads[&ParamId(1)], Grid::zeros(&[2, 2]));
}

#[test]
fn unregistered_parameter_is_disconnected() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[1], &[1.0]));
    let y = t.sum(x).unwrap();
    let err = t
        .backward(y, &Grid::scalar(1.0), &[ParamId(0), ParamId(7)])
        .unwrap_err();
    assert!(matches!(err, Error::Disconnected(_)));
}

#[test]
fn seed_shape_must_match_output() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[2], &[1.0, 2.0]));
    assert!(t.backward(x, &Grid::scalar(1.0), &[ParamId(0)]).is_err());
    let grads = t
        .backward(x, &g(&[2], &[2.0, -1.0]), &[ParamId(0)])
        .unwrap();
    assert_eq!(grads[&ParamId(0)].data(), &[2.0, -1.0]);
}

#[test]
fn detached_values_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &g(&[2], &[1.0, 2.0]));
    let d = t.detach(x);
    let y = t.mul(x, d).unwrap();
    let s = t.sum(y).unwrap();
    let grads = t.backward_scalar(s).unwrap();
    // d(x·stop(x))/dx = stop(x)
    assert_eq!(grads[&ParamId(0)].data(), &[1.0, 2.0]);
}

#[test]
fn quadratic_form_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 5;
    let b = random(&mut rng, &[n, n]);
    let a = b.zip_map(&b.transpose().unwrap(), |p, q| p + q).unwrap();
    let x0 = random(&mut rng, &[n, 1]);
    let a2 = a.clone();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let am = t.constant(a2.clone());
        let ax = t.matmul(am, v[0])?;
        let q = t.matmul_t(v[0], true, ax, false)?;
        t.reshape(q, &[1])
    };
    let err = finite_difference_check(&f, std::slice::from_ref(&x0), 1e-5).unwrap();
    assert!(err < 1e-8, "quadratic form error {err}");

    let mut t = Tape::new();
    let x = t.param(ParamId(0), &x0);
    let out = f(&mut t, &[x]).unwrap();
    let grads = t.backward_scalar(out).unwrap();
    let closed = a.matmul(&x0).unwrap().map(|v| 2.0 * v);
    for (p, q) in grads[&ParamId(0)].data().iter().zip(closed.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn constant_function_has_zero_error() {
    let f = |t: &mut Tape<f64>, _: &[Var]| Ok(t.constant(Grid::scalar(4.0)));
    let err = finite_difference_check(f, &[g(&[3], &[1.0, 2.0, 3.0])], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = away_from_zero(&mut rng, &[4, 6], false);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let r = t.relu(v[0])?;
        let sq = t.mul(r, v[0])?;
        t.sum(sq)
    };
    assert!(finite_difference_check(f, &[x], 1e-5).unwrap() < 1e-6);
}

#[test]
fn zero_eps_is_rejected() {
    let f = |t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]);
    assert!(finite_difference_check(f, &[g(&[1], &[1.0])], 0.0).is_err());
}

#[test]
fn non_finite_perturbation_reports_coordinate() {
    // log(x) at x = 1e-7: the −eps probe crosses zero.
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let l = t.log(v[0])?;
        t.sum(l)
    };
    let err = finite_difference_check(f, &[g(&[2], &[1.0, 1e-7])], 1e-5).unwrap_err();
    assert!(matches!(
        err,
        Error::NonFinitePerturbation { input: 0, index: 1 }
    ));
}

#[test]
fn backward_is_linear_in_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&mut rng, &[3, 4]);
    let w0 = random(&mut rng, &[4, 2]);
    let (a, b) = (0.7, -1.9);
    let build = |t: &mut Tape<f64>, ca: f64, cb: f64| -> Var {
        let x = t.param(ParamId(0), &x0);
        let w = t.param(ParamId(1), &w0);
        let y = t.matmul(x, w).unwrap();
        let f = {
            let e = t.exp(y).unwrap();
            t.sum(e).unwrap()
        };
        let gsum = {
            let r = t.l2_normalize(y, 1e-12).unwrap();
            let sq = t.mul(r, y).unwrap();
            t.sum(sq).unwrap()
        };
        let fa = t.scale(f, ca).unwrap();
        let gb = t.scale(gsum, cb).unwrap();
        t.add(fa, gb).unwrap()
    };
    let grads = |ca, cb| {
        let mut t = Tape::new();
        let out = build(&mut t, ca, cb);
        t.backward_scalar(out).unwrap()
    };
    let combined = grads(a, b);
    let gf = grads(1.0, 0.0);
    let gg = grads(0.0, 1.0);
    for id in [ParamId(0), ParamId(1)] {
        for ((c, f), gv) in combined[&id]
            .data()
            .iter()
            .zip(gf[&id].data())
            .zip(gg[&id].data())
        {
            assert!((c - (a * f + b * gv)).abs() < 1e-12);
        }
    }
}

#[test]
fn replay_reproduces_recorded_values_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = Tape::<f64>::new();
    let x = t.param(ParamId(0), &random(&mut rng, &[2, 3, 6, 6]));
    let w = t.param(ParamId(1), &random(&mut rng, &[4, 3, 3, 3]));
    let gm = t.param(ParamId(2), &Grid::ones(&[4]));
    let bt = t.param(ParamId(3), &Grid::zeros(&[4]));
    let c = t.conv2d(x, w, None, 2, 1).unwrap();
    let n = t.batch_norm(c, gm, bt, 1e-5, NormStats::Batch).unwrap();
    let r = t.relu(n).unwrap();
    let p = t.global_avg_pool(r).unwrap();
    let values = t.replay(&[]).unwrap();
    assert_eq!(values[p.index()], *t.value(p));
    for (i, v) in values.iter().enumerate() {
        assert_eq!(v.data(), t.nodes[i].value.data());
    }
    // Substituting an input changes downstream values.
    let moved = t.replay(&[(x, Grid::zeros(&[2, 3, 6, 6]))]).unwrap();
    assert_ne!(moved[c.index()], *t.value(c));
}

// ---------------------------------------------------------------------------
// Randomized gradient checks, one property per primitive.

/// Build `sum(op(inputs) ⊙ R)` for a fixed random `R`, so every output
/// coordinate contributes to the probed gradient.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = random(&mut rng, t.shape(y));
    let rc = t.constant(r);
    let m = t.mul(y, rc)?;
    t.sum(m)
}

fn check(
    seed: u64,
    inputs: Vec<Grid<f64>>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    finite_difference_check(
        |t, v| {
            let y = op(t, v)?;
            probe(t, y, seed)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

fn dims(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=max)).collect()
}

const TOL: f64 = 1e-4;

macro_rules! primitive_gradcheck {
    ($name:ident, |$rng:ident, $seed:ident| $body:block) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn $name($seed in any::<u64>()) {
                let mut $rng = ChaCha8Rng::seed_from_u64($seed);
                let err: f64 = $body;
                prop_assert!(err < TOL, "relative error {}", err);
            }
        }
    };
}

primitive_gradcheck!(grad_add_sub, |rng, seed| {
    let s = dims(&mut rng, 2, 4);
    let (a, b) = (random(&mut rng, &s), random(&mut rng, &s));
    let e1 = check(seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    let e2 = check(seed, vec![a, b], |t, v| t.sub(v[0], v[1]));
    e1.max(e2)
});

primitive_gradcheck!(grad_mul_div, |rng, seed| {
    let s = dims(&mut rng, 3, 3);
    let a = random(&mut rng, &s);
    let b = away_from_zero(&mut rng, &s, false);
    let e1 = check(seed, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    let e2 = check(seed, vec![a, b], |t, v| t.div(v[0], v[1]));
    e1.max(e2)
});

primitive_gradcheck!(grad_scale_and_scalar_ops, |rng, seed| {
    let s = dims(&mut rng, 2, 5);
    let a = random(&mut rng, &s);
    let c = rng.random_range(-3.0..3.0);
    let k = away_from_zero(&mut rng, &[1], false);
    let e1 = check(seed, vec![a.clone()], move |t, v| t.scale(v[0], c));
    let e2 = check(seed, vec![a.clone(), k.clone()], |t, v| {
        t.mul_scalar(v[0], v[1])
    });
    let e3 = check(seed, vec![a, k], |t, v| t.div_scalar(v[0], v[1]));
    e1.max(e2).max(e3)
});

primitive_gradcheck!(grad_exp_log_sqrt, |rng, seed| {
    let s = dims(&mut rng, 2, 4);
    let a = random(&mut rng, &s);
    let p = away_from_zero(&mut rng, &s, true);
    let e1 = check(seed, vec![a], |t, v| t.exp(v[0]));
    let e2 = check(seed, vec![p.clone()], |t, v| t.log(v[0]));
    let e3 = check(seed, vec![p], |t, v| t.sqrt(v[0]));
    e1.max(e2).max(e3)
});

primitive_gradcheck!(grad_relu, |rng, seed| {
    let s = dims(&mut rng, 3, 4);
    let a = away_from_zero(&mut rng, &s, false);
    check(seed, vec![a], |t, v| t.relu(v[0]))
});

primitive_gradcheck!(grad_reductions, |rng, seed| {
    let s = dims(&mut rng, 3, 4);
    let a = random(&mut rng, &s);
    let n = rng.random_range(1..=5);
    let sq = random(&mut rng, &[n, n]);
    let e1 = check(seed, vec![a.clone()], |t, v| t.sum(v[0]));
    let e2 = check(seed, vec![a.clone()], |t, v| t.mean(v[0]));
    let e3 = check(seed, vec![a], |t, v| t.sum_last_dim(v[0]));
    let e4 = check(seed, vec![sq], |t, v| t.trace(v[0]));
    e1.max(e2).max(e3).max(e4)
});

primitive_gradcheck!(grad_reshape_transpose, |rng, seed| {
    let s = dims(&mut rng, 2, 5);
    let a = random(&mut rng, &s);
    let flat = [s[0] * s[1]];
    let e1 = check(seed, vec![a.clone()], move |t, v| t.reshape(v[0], &flat));
    let e2 = check(seed, vec![a], |t, v| t.transpose(v[0]));
    e1.max(e2)
});

primitive_gradcheck!(grad_matmul, |rng, seed| {
    let d = dims(&mut rng, 3, 4);
    let (m, k, n) = (d[0], d[1], d[2]);
    let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let a = random(&mut rng, &if ta { [k, m] } else { [m, k] });
    let b = random(&mut rng, &if tb { [n, k] } else { [k, n] });
    check(seed, vec![a, b], move |t, v| t.matmul_t(v[0], ta, v[1], tb))
});

primitive_gradcheck!(grad_batched_matmul, |rng, seed| {
    let d = dims(&mut rng, 4, 3);
    let (bs, m, k, n) = (d[0], d[1], d[2], d[3]);
    let tb = rng.random_bool(0.5);
    let a = random(&mut rng, &[bs, m, k]);
    let b = random(&mut rng, &if tb { [bs, n, k] } else { [bs, k, n] });
    check(seed, vec![a, b], move |t, v| {
        t.batched_matmul(v[0], v[1], tb)
    })
});

primitive_gradcheck!(grad_bias_and_concat, |rng, seed| {
    let d = dims(&mut rng, 3, 4);
    let x = random(&mut rng, &[d[0], d[1]]);
    let b = random(&mut rng, &[d[1]]);
    let y = random(&mut rng, &[d[0], d[2]]);
    let e1 = check(seed, vec![x.clone(), b], |t, v| t.add_bias(v[0], v[1]));
    let e2 = check(seed, vec![x, y], |t, v| t.concat_last_dim(v[0], v[1]));
    e1.max(e2)
});

primitive_gradcheck!(grad_conv2d, |rng, seed| {
    let b = rng.random_range(1..=3);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let h = rng.random_range(3..=6);
    let w = rng.random_range(3..=6);
    let x = random(&mut rng, &[b, cin, h, w]);
    let wt = random(&mut rng, &[cout, cin, k, k]);
    if rng.random_bool(0.5) {
        let bias = random(&mut rng, &[cout]);
        check(seed, vec![x, wt, bias], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        })
    } else {
        check(seed, vec![x, wt], move |t, v| {
            t.conv2d(v[0], v[1], None, stride, pad)
        })
    }
});

primitive_gradcheck!(grad_batch_norm, |rng, seed| {
    let b = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let s = rng.random_range(1..=3);
    let x = random(&mut rng, &[b, c, s, 2]);
    let gamma = away_from_zero(&mut rng, &[c], true);
    let beta = random(&mut rng, &[c]);
    let running = rng.random_bool(0.5);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    check(seed, vec![x, gamma, beta], move |t, v| {
        let stats = if running {
            NormStats::Running {
                mean: mean.clone(),
                var: var.clone(),
            }
        } else {
            NormStats::Batch
        };
        t.batch_norm(v[0], v[1], v[2], 1e-5, stats)
    })
});

primitive_gradcheck!(grad_pooling, |rng, seed| {
    let b = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let geom = PatchGeom {
        rows: rng.random_range(1..=3),
        cols: rng.random_range(1..=3),
        patch_h: rng.random_range(1..=2),
        patch_w: rng.random_range(1..=2),
    };
    let h = geom.rows * geom.patch_h + rng.random_range(0..=1);
    let w = geom.cols * geom.patch_w + rng.random_range(0..=1);
    let x = random(&mut rng, &[b, c, h, w]);
    let e1 = check(seed, vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
    let e2 = check(seed, vec![x], move |t, v| t.patch_avg_pool(v[0], geom));
    e1.max(e2)
});

primitive_gradcheck!(grad_l2_normalize, |rng, seed| {
    let s = dims(&mut rng, 2, 5);
    let x = away_from_zero(&mut rng, &s, false);
    check(seed, vec![x], |t, v| t.l2_normalize(v[0], 1e-12))
});

primitive_gradcheck!(grad_upsample, |rng, seed| {
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let (oh, ow) = (h + rng.random_range(0..=5), w + rng.random_range(0..=5));
    let b = rng.random_range(1..=2);
    let x = random(&mut rng, &[b, 2, h, w]);
    check(seed, vec![x], move |t, v| t.upsample_bilinear(v[0], oh, ow))
});

primitive_gradcheck!(grad_cross_entropy, |rng, seed| {
    let outer = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let inner = rng.random_range(1..=3);
    let x = random(&mut rng, &[outer, classes, inner]).map(|v| 3.0 * v);
    let targets: Vec<usize> = (0..outer * inner)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let include = rng.random_bool(0.5);
    check(seed, vec![x], move |t, v| {
        t.cross_entropy(v[0], targets.clone(), include)
    })
});

primitive_gradcheck!(grad_layout_ops, |rng, seed| {
    let d = dims(&mut rng, 4, 3);
    let shape = [d[0], d[1], d[2], d[3]];
    let x = random(&mut rng, &shape);
    let rows = random(&mut rng, &[d[1], d[0] * d[2] * d[3]]);
    let e1 = check(seed, vec![x], |t, v| t.channels_to_rows(v[0]));
    let e2 = check(seed, vec![rows.clone()], move |t, v| {
        t.rows_to_channels(v[0], shape)
    });
    let e3 = check(seed, vec![rows], |t, v| t.center_rows(v[0]));
    e1.max(e2).max(e3)
});

primitive_gradcheck!(grad_channel_affine, |rng, seed| {
    let d = dims(&mut rng, 3, 3);
    let x = random(&mut rng, &[d[0], d[1], d[2], 2]);
    let gm = random(&mut rng, &[d[1]]);
    let bt = random(&mut rng, &[d[1]]);
    check(seed, vec![x, gm, bt], |t, v| {
        t.channel_affine(v[0], v[1], v[2])
    })
});

#[test]
fn cross_entropy_uniform_logits() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(Grid::zeros(&[2, 5]));
    let l = t.cross_entropy(x, vec![0, 3], true).unwrap();
    assert!((t.value(l).item() - 5f64.ln()).abs() < 1e-14);
    let l = t.cross_entropy(x, vec![0, 3], false).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-14);
}

#[test]
fn channels_rows_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = random(&mut rng, &[2, 3, 2, 2]);
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(x0.clone());
    let r = t.channels_to_rows(x).unwrap();
    assert_eq!(t.shape(r), &[3, 8]);
    // Row c holds channel c of image 0 then image 1.
    assert_eq!(t.value(r).at(&[1, 5]), x0.at(&[1, 1, 0, 1]));
    let back = t.rows_to_channels(r, [2, 3, 2, 2]).unwrap();
    assert_eq!(t.value(back), &x0);
}
