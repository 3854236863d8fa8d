use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uld_core::data::Example;
use uld_core::model::*;
use uld_core::objectives::*;
use uld_core::tensor::{cross_entropy_logits, Tape, Tensor};
use uld_core::Error;

mod common;
use common::*;

/// Evaluate `f` on a fresh tape for a frozen full model.
fn eval<F>(m: &ModelParams<f64>, f: F) -> f64
where
    F: for<'a, 't> Fn(&Policy<'a, 't, f64>) -> uld_core::Result<uld_core::tensor::Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars = m.register(&tape, false);
    let policy = Policy::Model {
        vars: &vars,
        config: &m.config,
    };
    f(&policy).unwrap().item().unwrap()
}

#[test]
fn ga_and_gd_oracles() {
    // V=1: certainty.
    let one = model(cfg(1, 1), 0);
    let b = Batch::new(vec![ex(&[0, 0], &[0, 0])], Source::Forget);
    assert_eq!(eval(&one, |p| loss_ga(p, &b)), 0.0);
    assert_eq!(eval(&one, |p| loss_gd(p, &b)), 0.0);

    // Zero head: uniform predictions.
    let two = zero_head(model(cfg(2, 1), 0));
    let b = Batch::new(vec![ex(&[1], &[0])], Source::Forget);
    assert_abs_diff_eq!(eval(&two, |p| loss_ga(p, &b)), 0.5f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(0.5f64.ln(), -0.6931, epsilon = 1e-4);
    let four = zero_head(model(cfg(4, 1), 0));
    let b = Batch::new(vec![ex(&[1, 2], &[3, 0, 1])], Source::Retain);
    assert_abs_diff_eq!(eval(&four, |p| loss_gd(p, &b)), 4f64.ln(), epsilon = 1e-12);
}

#[test]
fn ga_is_negative_mean_cross_entropy() {
    let m = model(cfg(11, 2), 3);
    let b = forget_batch();
    let mut total = 0.0;
    for e in &b.examples {
        let tokens = e.tokens();
        let logits = m.forward_logits(&tokens[..tokens.len() - 1]).unwrap();
        for (r, &t) in e.answer_rows().zip(&e.answer) {
            let row = Tensor::new(vec![11], logits.row(r).to_vec()).unwrap();
            total += cross_entropy_logits(&row, t).unwrap();
        }
    }
    let mean_ce = total / b.answer_tokens() as f64;
    let ga = eval(&m, |p| loss_ga(p, &b));
    let gd = eval(&m, |p| loss_gd(p, &b));
    assert_abs_diff_eq!(ga, -mean_ce, epsilon = 1e-6);
    assert_eq!(gd, -ga);
}

#[test]
fn kl_oracles() {
    let p = [0.5f64.ln(), 0.5f64.ln()];
    let q = [0.25f64.ln(), 0.75f64.ln()];
    let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert_abs_diff_eq!(kl_value(&p, &q), expect, epsilon = 1e-12);
    assert_abs_diff_eq!(expect, 0.1438, epsilon = 1e-4);

    let m = model(cfg(11, 2), 3);
    let reference = FrozenRows::reference(&m);
    let b = retain_batch();
    assert!(eval(&m, |p| loss_kl(p, &reference, &b)).abs() < 1e-7);

    // Tape KL matches per-row KL of independently computed log-probs.
    let other = model(cfg(11, 2), 4);
    let mut manual = 0.0;
    for e in &b.examples {
        let lp = answer_log_probs(&other, e).unwrap();
        let lq = answer_log_probs(&m, e).unwrap();
        for i in 0..e.answer.len() {
            manual += kl_value(lp.row(i), lq.row(i));
        }
    }
    manual /= b.answer_tokens() as f64;
    assert_abs_diff_eq!(eval(&other, |p| loss_kl(p, &reference, &b)), manual, epsilon = 1e-10);
}

#[test]
fn preference_oracles() {
    assert_abs_diff_eq!(dpo_value(0.0, 0.0, 1.0), 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(dpo_value(1.0, -1.0, 1.0), 0.1269, epsilon = 1e-4);
    assert!(dpo_value(50.0, -50.0, 1.0) < 1e-30);
    assert_abs_diff_eq!(npo_value(0.0, 1.0), 1.3863, epsilon = 1e-4);
    assert!(npo_value(-100.0, 1.0) < 1e-30);
    for d in [-3.0, -0.5, 0.0, 0.7, 4.0] {
        for beta in [0.1, 1.0, 5.0] {
            // With Δ_idk = 0 the sigmoid arguments coincide.
            assert_abs_diff_eq!(2.0 * dpo_value(0.0, d, beta), npo_value(d, beta), epsilon = 1e-12);
            // NPO pushes log p(y|x) down: positive slope in Δ_y.
            let h = 1e-6;
            assert!(npo_value(d + h, beta) > npo_value(d - h, beta));
        }
    }
}

#[test]
fn preference_losses_at_reference() {
    let m = model(cfg(11, 2), 5);
    let reference = FrozenRows::reference(&m);
    let (f, idk) = (forget_batch(), idk_batch());
    for beta in [0.1, 1.0] {
        let dpo = eval(&m, |p| loss_dpo(p, &reference, &f, &idk, beta, false));
        assert_abs_diff_eq!(dpo, 2f64.ln() / beta, epsilon = 1e-10);
        let npo = eval(&m, |p| loss_npo(p, &reference, &f, beta, false));
        assert_abs_diff_eq!(npo, 2.0 * 2f64.ln() / beta, epsilon = 1e-10);
    }
    assert_abs_diff_eq!(2f64.ln(), 0.6931, epsilon = 1e-4);
}

#[test]
fn preference_losses_match_sequence_logprobs() {
    let (theta, theta0) = (model(cfg(11, 2), 6), model(cfg(11, 2), 7));
    let reference = FrozenRows::reference(&theta0);
    let (f, idk) = (forget_batch(), idk_batch());
    let lp = |m: &ModelParams<f64>, e: &Example| sequence_logprob(m, &e.prompt, &e.answer).unwrap();
    for norm in [false, true] {
        let scale = |e: &Example| if norm { e.answer.len() as f64 } else { 1.0 };
        let (mut dpo, mut npo) = (0.0, 0.0);
        for (y, alt) in f.examples.iter().zip(&idk.examples) {
            let dy = (lp(&theta, y) - lp(&theta0, y)) / scale(y);
            let di = (lp(&theta, alt) - lp(&theta0, alt)) / scale(alt);
            dpo += dpo_value(di, dy, 0.1) / 2.0;
            npo += npo_value(dy, 0.1) / 2.0;
        }
        let got_dpo = eval(&theta, |p| loss_dpo(p, &reference, &f, &idk, 0.1, norm));
        let got_npo = eval(&theta, |p| loss_npo(p, &reference, &f, 0.1, norm));
        assert_abs_diff_eq!(got_dpo, dpo, epsilon = 1e-9);
        assert_abs_diff_eq!(got_npo, npo, epsilon = 1e-9);
    }
    let short = Batch::new(idk.examples[..1].to_vec(), Source::Idk);
    let tape = Tape::new();
    let vars = theta.register(&tape, false);
    let policy = Policy::Model {
        vars: &vars,
        config: &theta.config,
    };
    assert!(matches!(loss_dpo(&policy, &reference, &f, &short, 0.1, false), Err(Error::Contract(_))));
    let empty = Batch::new(vec![], Source::Forget);
    assert!(matches!(loss_ga(&policy, &empty), Err(Error::Contract(_))));
}

fn assistant_eval(a: &AssistantModel<f64>, f: &Batch, r: &Batch, w: f64) -> (f64, f64) {
    let tape = Tape::new();
    let (base, adapters) = a.register(&tape);
    let policy = Policy::Assistant {
        vars: &base,
        adapters: &adapters,
        config: &a.target.config,
        k: a.k,
    };
    let total = loss_uld_assistant(&policy, f, r, w).unwrap().item().unwrap();
    let uni = loss_uniform_ce(&policy, r).unwrap().item().unwrap();
    (total, uni)
}

#[test]
fn assistant_loss_oracles() {
    let target = Arc::new(zero_head(model(cfg(4, 2), 1)).frozen());
    let a = build_assistant(target, 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let f = Batch::new(vec![ex(&[1, 2], &[3, 0])], Source::Forget);
    let r = Batch::new(vec![ex(&[1, 3], &[2, 2, 1])], Source::Retain);
    let (total, uni) = assistant_eval(&a, &f, &r, 6.5);
    assert_abs_diff_eq!(uni, 4f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(total, 7.5 * 4f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(total, 10.397, epsilon = 1e-3);
}

#[test]
fn combination_rules() {
    let m = model(cfg(11, 2), 8);
    let reference = FrozenRows::reference(&m);
    let (f, r) = (forget_batch(), retain_batch());
    let ga = eval(&m, |p| loss_ga(p, &f));
    let run = |method: &str, w: f64| {
        let mut c = LossConfig::new(method.parse().unwrap());
        c.retain_weight = w;
        eval(&m, |p| {
            method_loss(
                &c,
                p,
                Some(&reference),
                StepBatches {
                    forget: &f,
                    retain: Some(&r),
                    idk: None,
                },
            )
        })
    };
    assert_eq!(run("GA", 0.0), ga);
    assert_abs_diff_eq!(run("GA+KL", 1.0), ga, epsilon = 1e-12);
    let gd = eval(&m, |p| loss_gd(p, &r));
    assert_abs_diff_eq!(run("GA+GD", 2.0), ga + 2.0 * gd, epsilon = 1e-12);

    assert_abs_diff_eq!(combine_conventional("NPO+GD", 1.3863, Some(0.5), 1.0).unwrap(), 1.8863, epsilon = 1e-12);
    assert_eq!(combine_conventional("GA", -0.7, None, 0.0).unwrap(), -0.7);
    assert!(matches!(combine_conventional("XYZ+KL", 1.0, None, 1.0), Err(Error::Config(_))));
    assert!(matches!("GA+XX".parse::<Method>(), Err(Error::Config(_))));
}

#[test]
fn method_tags_round_trip() {
    let mut all = Method::baselines();
    all.push(Method::Uld);
    assert_eq!(all.len(), 13);
    for m in all {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        assert_eq!(m.slug().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
    }
    assert_eq!("offset-npo+kl".parse::<Method>().unwrap().to_string(), "OFFSET-NPO+KL");
    let bad = LossConfig {
        preference_beta: 0.0,
        ..LossConfig::new(Method::Uld)
    };
    assert!(bad.validate().is_err());
}

fn offset_rows(target: &ModelParams<f64>, phi: &ModelParams<f64>, phi0: &ModelParams<f64>, alpha: f64, e: &Example) -> Tensor<f64> {
    let base = FrozenRows::offset_base(target, phi0, alpha).unwrap();
    let tape = Tape::new();
    let vars = phi.register(&tape, true);
    let policy = Policy::offset(&vars, &phi.config, alpha, &base).unwrap();
    policy.answer_log_probs(e).unwrap().value()
}

#[test]
fn offset_identities() {
    let target = model(cfg(11, 2), 1);
    let phi0 = model(cfg(11, 1), 2);
    let mut phi = phi0.clone();
    let e = ex(&[1, 4, 5], &[6, 7, 2]);
    let truth = answer_log_probs(&target, &e).unwrap();
    for alpha in [0.0, 0.5, 1.0, 3.0] {
        let got = offset_rows(&target, &phi, &phi0, alpha, &e);
        for (a, b) in got.data().iter().zip(truth.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in phi.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let got = offset_rows(&target, &phi, &phi0, 0.0, &e);
    for (a, b) in got.data().iter().zip(truth.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    let moved = offset_rows(&target, &phi, &phi0, 1.0, &e);
    assert!(moved.data().iter().zip(truth.data()).any(|(a, b)| (a - b).abs() > 1e-6));

    let small = model(cfg(7, 1), 2);
    assert!(matches!(FrozenRows::offset_base(&target, &small, 1.0), Err(Error::Contract(_))));
    let base = FrozenRows::offset_base(&target, &phi0, 1.0).unwrap();
    let tape = Tape::new();
    let vars = small.register(&tape, true);
    assert!(matches!(Policy::offset(&vars, &small.config, 1.0, &base), Err(Error::Contract(_))));
}

#[test]
fn gradient_ascent_is_unbounded() {
    let mut m = model(cfg(11, 1), 4);
    let b = forget_batch();
    let mut last = f64::INFINITY;
    let mut first = None;
    for _ in 0..30 {
        let tape = Tape::new();
        let vars = m.register(&tape, true);
        let policy = Policy::Model {
            vars: &vars,
            config: &m.config,
        };
        let loss = loss_ga(&policy, &b).unwrap();
        let value = loss.item().unwrap();
        assert!(value < last, "{value} !< {last}");
        last = value;
        first.get_or_insert(value);
        tape.backward(loss).unwrap();
        let grads: Vec<_> = vars.leaves().iter().map(|v| tape.grad(*v).unwrap()).collect();
        for (t, g) in m.tensors_mut().into_iter().zip(grads) {
            t.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x -= 0.02 * g);
        }
    }
    let first = first.unwrap();
    assert!(last < first - 2.0, "{first} -> {last}");
}

#[test]
fn losses_pass_gradient_check() {
    for seed in 0..2 {
        for (name, err) in gradient_errors(seed) {
            assert!(err < 1e-4, "seed {seed} {name}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn assistant_loss_is_bounded_below(seed in 0u64..10_000, spread in 0.0f64..3.0) {
        let target = Arc::new(model(cfg(11, 2), seed).frozen());
        let mut a = build_assistant(target, 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for t in a.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-spread..=spread));
        }
        let (total, uni) = assistant_eval(&a, &forget_batch(), &retain_batch(), 6.5);
        prop_assert!(uni >= 11f64.ln() - 1e-12);
        prop_assert!(total >= 6.5 * 11f64.ln() - 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(a in prop::collection::vec(-8.0f64..8.0, 5), b in prop::collection::vec(-8.0f64..8.0, 5)) {
        let lp = uld_core::tensor::log_softmax(&Tensor::new(vec![5], a).unwrap()).unwrap();
        let lq = uld_core::tensor::log_softmax(&Tensor::new(vec![5], b).unwrap()).unwrap();
        prop_assert!(kl_value(lp.data(), lq.data()) >= -1e-12);
    }

    #[test]
    fn preference_losses_are_nonnegative(di in -50.0f64..50.0, dy in -50.0f64..50.0, beta in 0.01f64..10.0) {
        prop_assert!(dpo_value(di, dy, beta) >= 0.0);
        prop_assert!(npo_value(dy, beta) >= 0.0);
    }
}
