use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uld_core::tensor::*;
use uld_core::Error;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_oracles() {
    let a = t64(&[2, 2], &[1., 2., 3., 4.]);
    let id = t64(&[2, 2], &[1., 0., 0., 1.]);
    assert_eq!(matmul(&a, &id).unwrap(), a);
    let b = t64(&[2, 1], &[5., 6.]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
    let z = Tensor::<f64>::zeros(&[2, 3]);
    let any = random(&[3, 4], 1);
    assert!(matmul(&z, &any).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(matches!(matmul(&a, &any), Err(Error::Shape(_))));
}

#[test]
fn softmax_oracles() {
    let s = softmax(&t64(&[3], &[0., 0., 0.])).unwrap();
    for &p in s.data() {
        assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
    }
    let s = softmax(&t64(&[2], &[0., 2f64.ln()])).unwrap();
    assert_abs_diff_eq!(s.data()[0], 1.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.data()[1], 2.0 / 3.0, epsilon = 1e-12);
}

#[test]
fn cross_entropy_oracles() {
    let ce = cross_entropy_logits(&t64(&[2], &[0., 0.]), 0).unwrap();
    assert_abs_diff_eq!(ce, 2f64.ln(), epsilon = 1e-12);
    let ce = cross_entropy_logits(&t64(&[2], &[1., 0.]), 0).unwrap();
    assert_abs_diff_eq!(ce, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(ce, 0.3133, epsilon = 1e-4);
    let ce = cross_entropy_logits(&t64(&[3], &[20., 0., 0.]), 0).unwrap();
    assert!(ce < 1e-6);
    assert!(matches!(
        cross_entropy_logits(&t64(&[2], &[0., 0.]), 2),
        Err(Error::Index { .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = t64(&[4], &[0.3, -1.2, 2.0, 0.1]);
    let tape = Tape::new();
    let x = tape.variable(&logits);
    let loss = x.cross_entropy(&[2]).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    let p = softmax(&logits).unwrap();
    for i in 0..4 {
        let expect = p.data()[i] - if i == 2 { 1.0 } else { 0.0 };
        assert_abs_diff_eq!(g.data()[i], expect, epsilon = 1e-12);
    }
}

#[test]
fn rms_norm_oracles() {
    let one = t64(&[2], &[1., 1.]);
    let y = rms_norm(&t64(&[2], &[5., 5.]), &one).unwrap();
    assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-6);
    let y = rms_norm(&t64(&[2], &[3., 4.]), &one).unwrap();
    assert_abs_diff_eq!(y.data()[0], 0.8485, epsilon = 1e-4);
    assert_abs_diff_eq!(y.data()[1], 1.1314, epsilon = 1e-4);
    let y = rms_norm(&t64(&[2], &[3., 4.]), &t64(&[2], &[0., 0.])).unwrap();
    assert_eq!(y.data(), &[0., 0.]);
}

#[test]
fn backward_basics() {
    let tape = Tape::new();
    let x = tape.variable(&t64(&[3], &[1., 2., 3.]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);
    // accumulation without reset
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2., 2., 2.]);

    let tape = Tape::new();
    let x = tape.variable(&t64(&[1], &[3.]));
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.]);

    assert!(matches!(tape.backward(x.add(x).unwrap().exp().log_softmax()), Ok(())));
    let v = tape.variable(&t64(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn reset_clears_tape() {
    let mut tape = Tape::<f64>::new();
    {
        let x = tape.variable(&t64(&[2], &[1., 2.]));
        let _ = x.exp().sum();
    }
    assert_eq!(tape.len(), 3);
    tape.reset();
    assert!(tape.is_empty());
}

#[test]
fn finite_diff_trivial_cases() {
    let x = t64(&[3], &[1., 2., 3.]);
    let err = finite_diff_check(|_, v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = finite_diff_check(|t, _| Ok(t.constant(&t64(&[1], &[4.0]))), &x, 1e-5).unwrap();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn ce_of_linear_map_matches_finite_differences() {
    for seed in 0..5 {
        let w = random(&[3, 5], seed);
        let x = random(&[1, 3], seed + 100);
        let err = finite_diff_check_many(
            |_, v| v[1].matmul(v[0])?.cross_entropy(&[2]),
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn every_op_passes_gradient_check() {
    type Builder = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> uld_core::Result<Var<'t, f64>>;
    let cases: Vec<(&str, Vec<Tensor<f64>>, Builder)> = vec![
        ("matmul", vec![random(&[3, 4], 1), random(&[4, 2], 2)], |_, v| {
            Ok(v[0].matmul(v[1])?.mul(v[0].matmul(v[1])?)?.sum())
        }),
        ("add_sub_mul_scale", vec![random(&[2, 3], 3), random(&[2, 3], 4)], |_, v| {
            Ok(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.7).sum())
        }),
        ("rms_norm", vec![random(&[3, 4], 5), random(&[4], 6)], |_, v| {
            let y = v[0].rms_norm(v[1])?;
            Ok(y.mul(y.exp())?.sum())
        }),
        ("silu", vec![random(&[2, 3], 7)], |_, v| Ok(v[0].silu().exp().sum())),
        ("embed", vec![random(&[5, 3], 8)], |_, v| {
            let e = v[0].embed(&[1, 4, 1, 0])?;
            Ok(e.mul(e)?.sum())
        }),
        ("rope", vec![random(&[4, 8], 9)], |_, v| {
            let r = v[0].rope(2)?;
            Ok(r.mul(r.exp())?.sum())
        }),
        ("attention", vec![random(&[4, 8], 10), random(&[4, 8], 11), random(&[4, 8], 12)], |_, v| {
            let y = v[0].attention(v[1], v[2], 2)?;
            Ok(y.mul(y.exp())?.sum())
        }),
        ("log_softmax", vec![random(&[3, 5], 13)], |_, v| {
            Ok(v[0].log_softmax().gather(&[0, 4, 2])?.sum())
        }),
        ("softmax", vec![random(&[3, 5], 14)], |_, v| {
            let p = v[0].softmax();
            Ok(p.mul(p)?.sum_rows().exp().sum())
        }),
        ("select_rows", vec![random(&[4, 3], 15)], |_, v| {
            let r = v[0].select_rows(&[3, 1, 3])?;
            Ok(r.mul(r)?.mean())
        }),
        ("log_sigmoid", vec![random(&[5], 16)], |_, v| {
            Ok(v[0].scale(7.0).log_sigmoid().sum())
        }),
        ("transformer_block", vec![random(&[5, 4], 17), random(&[4, 4], 18), random(&[4], 19)], |t, v| {
            let w = t.constant(&random(&[4, 5], 20));
            let h = v[0].rms_norm(v[2])?;
            let q = h.matmul(v[1])?.rope(2)?;
            let a = q.attention(q, h, 2)?;
            let x = v[0].add(a)?.silu();
            x.matmul(w)?.cross_entropy(&[0, 1, 2, 3, 4])
        }),
    ];
    for (name, inputs, f) in cases {
        let err = finite_diff_check_many(f, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn gradients_are_bitwise_reproducible() {
    let run = || {
        let tape = Tape::new();
        let x = tape.variable(&random(&[4, 8], 3).cast::<f32>());
        let y = x.rope(2).unwrap().attention(x, x, 2).unwrap().log_softmax();
        tape.backward(y.sum()).unwrap();
        tape.grad(x).unwrap()
    };
    assert!(run().bitwise_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let s = softmax(&t64(&[v.len()], &v)).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..10), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = softmax(&t64(&[v.len()], &v)).unwrap();
        let b = softmax(&t64(&[v.len()], &shifted)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(v in prop::collection::vec(-40.0f64..40.0, 1..10), t in 0usize..10) {
        let t = t % v.len();
        prop_assert!(cross_entropy_logits(&t64(&[v.len()], &v), t).unwrap() >= 0.0);
    }

    #[test]
    fn composite_gradients_match(seed in 0u64..1000) {
        let x = random(&[3, 4], seed);
        let g = random(&[4], seed + 1);
        let err = finite_diff_check_many(|_, v| {
            let h = v[0].rms_norm(v[1])?.silu();
            h.log_softmax().gather(&[0, 3, 1])?.mean().neg().log_sigmoid().neg().exp().sum().mean().scale(2.0).add(h.sum())
        }, &[x, g], 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }
}
