//! Fixtures shared by the objective and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use uld_core::data::Example;
use uld_core::model::*;
use uld_core::objectives::*;
use uld_core::tensor::{finite_diff_check_many, Tensor};

pub fn cfg(vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 16,
        rope: true,
    }
}

pub fn model(c: ModelConfig, seed: u64) -> ModelParams<f64> {
    ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn zero_head(mut m: ModelParams<f64>) -> ModelParams<f64> {
    m.lm_head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    m
}

pub fn ex(prompt: &[usize], answer: &[usize]) -> Example {
    Example {
        prompt: prompt.to_vec(),
        answer: answer.to_vec(),
    }
}

pub fn forget_batch() -> Batch {
    Batch::new(vec![ex(&[1, 4, 5], &[6, 7, 2]), ex(&[1, 8], &[9, 2])], Source::Forget)
}

pub fn retain_batch() -> Batch {
    Batch::new(vec![ex(&[1, 3, 9, 4], &[5, 2]), ex(&[1, 10], &[4, 4, 2])], Source::Retain)
}

pub fn idk_batch() -> Batch {
    Batch::new(vec![ex(&[1, 4, 5], &[3, 3, 2]), ex(&[1, 8], &[10, 2])], Source::Idk)
}

/// Every loss through every policy kind on a 1-layer model.
pub fn gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let c = cfg(11, 1);
    let theta = model(c.clone(), seed);
    let theta0 = model(c.clone(), seed + 1000);
    let reference = FrozenRows::reference(&theta0);
    let (f, r, idk) = (forget_batch(), retain_batch(), idk_batch());
    let mut out = Vec::new();
    let leaves: Vec<Tensor<f64>> = theta.tensors().into_iter().cloned().collect();

    let mut methods: Vec<Method> = Method::baselines()
        .into_iter()
        .filter(|m| matches!(m, Method::Conventional { .. }))
        .collect();
    methods.sort_by_key(|m| m.to_string());
    for method in methods {
        let lc = LossConfig::new(method);
        let err = finite_diff_check_many(
            |_, vars| {
                let mv = ModelVars::from_leaves(&c, vars)?;
                let policy = Policy::Model { vars: &mv, config: &c };
                let batches = StepBatches {
                    forget: &f,
                    retain: Some(&r),
                    idk: Some(&idk),
                };
                method_loss(&lc, &policy, Some(&reference), batches)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        out.push((method.to_string(), err));
    }

    // Assistant objective over the adapters of a 2-layer target.
    let target = Arc::new(model(cfg(11, 2), seed + 7).frozen());
    let mut a = build_assistant(target.clone(), 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    for t in a.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let adapter_leaves: Vec<Tensor<f64>> = a.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let err = finite_diff_check_many(
        |tape, vars| {
            let base = target.register(tape, false);
            let ads = AdapterVars::from_leaves(2.0, vars)?;
            let policy = Policy::Assistant {
                vars: &base,
                adapters: &ads,
                config: &target.config,
                k: 1,
            };
            loss_uld_assistant(&policy, &f, &r, 6.5)
        },
        &adapter_leaves,
        1e-5,
    )
    .unwrap();
    out.push(("ULD".into(), err));

    // Offset composition; φ is a standalone 1-layer model.
    let phi0 = model(c.clone(), seed + 2000);
    let phi: Vec<Tensor<f64>> = theta.tensors().into_iter().cloned().collect();
    let big = model(cfg(11, 2), seed + 3000);
    let base = FrozenRows::offset_base(&big, &phi0, 1.0).unwrap();
    let big_ref = FrozenRows::reference(&big);
    for name in ["OFFSET-GA+KL", "OFFSET-DPO+KL", "OFFSET-NPO+KL"] {
        let lc = LossConfig::new(name.parse().unwrap());
        let err = finite_diff_check_many(
            |_, vars| {
                let mv = ModelVars::from_leaves(&c, vars)?;
                let policy = Policy::offset(&mv, &c, 1.0, &base)?;
                let batches = StepBatches {
                    forget: &f,
                    retain: Some(&r),
                    idk: Some(&idk),
                };
                method_loss(&lc, &policy, Some(&big_ref), batches)
            },
            &phi,
            1e-5,
        )
        .unwrap();
        out.push((name.into(), err));
    }
    out
}

