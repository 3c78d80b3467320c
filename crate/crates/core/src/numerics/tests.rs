use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let m = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
    let i = tape.constant(Tensor::identity(3));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(t2(&[&[1.0], &[1.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 4]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let x = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
}

#[test]
fn softmax_along_leading_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[0.0, 1.0], &[0.0, 3.0]]));
    let s = tape.softmax(x, 0).unwrap();
    let v = tape.value(s);
    assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
    assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
}

#[test]
fn group_norm_examples() {
    let mut tape = Tape::new();
    // constant per group -> zeros
    let x = tape.constant(Tensor::full([3, 4], 2.5));
    let y = tape.group_norm(x, 2, NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // [1, -1] already standardized
    let x = tape.constant(t2(&[&[1.0, -1.0]]));
    let y = tape.group_norm(x, 2, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

    let x = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.group_norm(x, 2, NORM_EPS), Err(Error::Config(_))));
}

#[test]
fn group_norm_32_channels_two_groups_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut data = Tensor::randn([10, 32], 1.0, &mut rng).into_vec();
    // second group offset and scaled: must not leak into the first
    for r in 0..10 {
        for c in 16..32 {
            data[r * 32 + c] = data[r * 32 + c] * 50.0 + 7.0;
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([10, 32], data.clone()).unwrap());
    let y = tape.group_norm(x, 16, NORM_EPS).unwrap();
    let first_only = {
        let mut t2 = Tape::new();
        let sub: Vec<f64> = (0..10).flat_map(|r| data[r * 32..r * 32 + 16].to_vec()).collect();
        let xs = t2.constant(Tensor::new([10, 16], sub).unwrap());
        let ys = t2.group_norm(xs, 16, NORM_EPS).unwrap();
        t2.value(ys).clone()
    };
    let yv = tape.value(y);
    for r in 0..10 {
        for c in 0..16 {
            assert_eq!(yv.at(r, c), first_only.at(r, c));
        }
    }
    for g in 0..2 {
        let vals: Vec<f64> = (0..10).flat_map(|r| (0..16).map(move |c| (r, g * 16 + c))).map(|(r, c)| yv.at(r, c)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn grad_of_square() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.grad(y, &[x]).unwrap();
    assert_eq!(g[0].item(), 6.0);
}

#[test]
fn grad_of_softmax_sum_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]));
    let s = tape.softmax(x, 0).unwrap();
    let l = tape.sum(s);
    let g = tape.grad(l, &[x]).unwrap();
    assert!(g[0].data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn grad_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(tape.grad(y, &[x]), Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        Tensor::randn([5, 4], 1.0, &mut rng),
        Tensor::randn([4, 6], 0.5, &mut rng),
        Tensor::randn([6], 0.1, &mut rng),
        Tensor::randn([6, 3], 0.5, &mut rng),
    ];
    let report = check_gradients(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.tanh(h);
            let o = t.matmul(h, v[3])?;
            let o = t.square(o);
            Ok(t.sum(o))
        },
        &inputs,
        Coords::All,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn quadratic_form_check_is_tight() {
    let a = t2(&[&[2.0, 0.5, 0.0], &[0.5, 1.0, 0.3], &[0.0, 0.3, 3.0]]);
    let x = Tensor::new([3, 1], vec![0.4, -1.1, 0.9]).unwrap();
    let err = finite_diff_check(
        |t, x| {
            let av = t.constant(a.clone());
            let ax = t.matmul(av, x)?;
            let p = t.mul(ax, x)?;
            Ok(t.sum(p))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::vector(vec![0.1, -0.4, 0.9]));
    let q = Tensor::vector(vec![0.0, -0.5, 1.0]);
    let zq = tape.straight_through(z, &q).unwrap();
    assert_eq!(tape.value(zq), &q);
    let w = tape.constant(Tensor::vector(vec![3.0, -2.0, 0.5]));
    let y = tape.mul(zq, w).unwrap();
    let y = tape.tanh(y);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(z).unwrap().data(), g.get(zq).unwrap().data());
}

#[test]
fn stop_gradient_blocks_and_replays() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let s = tape.stop_gradient(x);
    let y = tape.mul(x, s).unwrap();
    let g = tape.grad(y, &[x]).unwrap();
    assert_eq!(g[0].item(), 2.0);

    let frozen = tape.take_detached();
    let mut replay = Tape::replaying(frozen);
    let x2 = replay.param(Tensor::scalar(5.0));
    let s2 = replay.stop_gradient(x2);
    assert_eq!(replay.value(s2).item(), 2.0);
}

/// Each primitive against central differences at random points.
mod primitives {
    use super::*;

    const POINTS: u64 = 100;

    fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
        for seed in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s.to_vec(), 1.0, &mut rng)).collect();
            let r = check_gradients(&f, &inputs, Coords::All, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
        }
    }

    // weighted sum so that every output element contributes differently
    fn reduce(t: &mut Tape, v: Var) -> crate::Result<Var> {
        let n = t.value(v).numel();
        let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let wv = t.constant(Tensor::new(t.shape(v).to_vec(), w)?);
        let p = t.mul(v, wv)?;
        Ok(t.sum(p))
    }

    #[test]
    fn matmul_transpose() {
        check("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.transpose(m)?;
            reduce(t, m)
        });
    }

    #[test]
    fn elementwise_binary() {
        check("binary", &[&[3, 4], &[3, 4], &[4]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.add_row(c, v[2])?;
            let e = t.mul_row(d, v[2])?;
            let f = t.scale(e, 0.7);
            let f = t.add_scalar(f, 1.5);
            reduce(t, f)
        });
    }

    #[test]
    fn elementwise_unary() {
        check("unary", &[&[2, 5]], |t, v| {
            let a = t.tanh(v[0]);
            let b = t.exp(a);
            let c = t.ln(b);
            let d = t.relu(v[0]);
            let e = t.leaky_relu(v[0], 0.1);
            let f = t.abs(v[0]);
            let g = t.square(v[0]);
            let s = t.concat_rows(&[c, d, e, f, g])?;
            let m = t.mean(s);
            let r = reduce(t, s)?;
            t.add(m, r)
        });
    }

    #[test]
    fn softmax_both_axes() {
        check("softmax", &[&[3, 4]], |t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let c = t.log_softmax(v[0], 1)?;
            let s = t.concat_rows(&[a, b, c])?;
            reduce(t, s)
        });
    }

    #[test]
    fn normalization() {
        check("norm", &[&[4, 6]], |t, v| {
            let a = t.group_norm(v[0], 3, NORM_EPS)?;
            let b = t.layer_norm(v[0], NORM_EPS)?;
            let s = t.concat_rows(&[a, b])?;
            reduce(t, s)
        });
    }

    #[test]
    fn convolutions() {
        check("conv", &[&[9, 2], &[4, 2, 3], &[4, 3, 2]], |t, v| {
            let a = t.conv1d(v[0], v[1], 2, 1)?;
            let b = t.conv_transpose1d(a, v[2], 2, 1)?;
            reduce(t, b)
        });
    }

    #[test]
    fn indexing_and_layout() {
        check("index", &[&[5, 3], &[2, 4]], |t, v| {
            let g = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            let c = t.concat_cols(&[g, g])?;
            let s = t.slice_cols(c, 1, 4)?;
            let r = t.slice_rows(s, 1, 2)?;
            let rr = t.concat_rows(&[r, v[1]])?;
            let rr = t.reshape(rr, &[2, 8])?;
            let p = t.pick_cols(rr, &[0, 7])?;
            let a = reduce(t, rr)?;
            let b = reduce(t, p)?;
            t.add(a, b)
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(xs in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(xs));
        let s = tape.softmax(x, 0).unwrap();
        let total: f64 = tape.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn backward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([4, 4], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(a.clone());
            let y = tape.matmul(x, x).unwrap();
            let y = tape.softmax(y, 1).unwrap();
            let z = tape.layer_norm(y, NORM_EPS).unwrap();
            let z = tape.mul(z, x).unwrap();
            let l = tape.sum(z);
            tape.grad(l, &[x]).unwrap().remove(0)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data(), b.data());
    }
}
