use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uld_core::model::checkpoint::{assistant_to_bytes, checkpoint_from_bytes, model_to_bytes};
use uld_core::model::*;
use uld_core::tensor::{Tape, Tensor};
use uld_core::Error;

fn tiny(rope: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 12,
        rope,
    }
}

fn model<T: uld_core::tensor::Scalar>(config: ModelConfig, seed: u64) -> ModelParams<T> {
    ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Perturb every parameter so gains and zero-init tensors carry information.
fn jitter(p: &mut ModelParams<f64>, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

// ---- straight-line reference forward -------------------------------------

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

fn rotate(x: &mut [f64], pos: usize, heads: usize) {
    let hd = x.len() / heads;
    for h in 0..heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / hd as f64);
            let a = h * hd + 2 * i;
            let (x0, x1) = (x[a], x[a + 1]);
            x[a] = x0 * theta.cos() - x1 * theta.sin();
            x[a + 1] = x0 * theta.sin() + x1 * theta.cos();
        }
    }
}

/// Logits at the final position of `tokens`, computed one position at a time.
fn reference_last_logits(p: &ModelParams<f64>, tokens: &[usize]) -> Vec<f64> {
    let cfg = &p.config;
    let heads = cfg.n_heads;
    let hd = cfg.d_model / heads;
    let emb = mat(&p.tok_embed);
    let mut xs: Mat = tokens.iter().map(|&t| emb[t].clone()).collect();
    if let Some(pos) = &p.pos_embed {
        let pos = mat(pos);
        for (t, x) in xs.iter_mut().enumerate() {
            for (a, b) in x.iter_mut().zip(&pos[t]) {
                *a += b;
            }
        }
    }
    for layer in &p.layers {
        let (wq, wk, wv, wo) = (mat(&layer.wq), mat(&layer.wk), mat(&layer.wv), mat(&layer.wo));
        let (up, down) = (mat(&layer.w_up), mat(&layer.w_down));
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (t, x) in xs.iter().enumerate() {
            let h = rmsnorm(x, layer.attn_norm.data());
            let (mut q, mut k) = (vecmat(&h, &wq), vecmat(&h, &wk));
            if cfg.rope {
                rotate(&mut q, t, heads);
                rotate(&mut k, t, heads);
            }
            qs.push(q);
            ks.push(k);
            vs.push(vecmat(&h, &wv));
        }
        let mut next = Vec::new();
        for t in 0..xs.len() {
            let mut att = vec![0.0; cfg.d_model];
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        qs[t][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for c in r.clone() {
                        att[c] += w * vs[j][c];
                    }
                }
            }
            let mut x: Vec<f64> = xs[t].iter().zip(vecmat(&att, &wo)).map(|(a, b)| a + b).collect();
            let h = rmsnorm(&x, layer.mlp_norm.data());
            let u: Vec<f64> = vecmat(&h, &up).iter().map(|v| v / (1.0 + (-v).exp())).collect();
            for (a, b) in x.iter_mut().zip(vecmat(&u, &down)) {
                *a += b;
            }
            next.push(x);
        }
        xs = next;
    }
    let last = rmsnorm(xs.last().unwrap(), p.final_norm.data());
    vecmat(&last, &mat(&p.lm_head))
}

#[test]
fn forward_matches_straight_line_reference() {
    for rope in [true, false] {
        let mut p = model::<f64>(tiny(rope), 3);
        jitter(&mut p, 4);
        let tokens = [1, 5, 9, 2, 7, 7, 0, 10];
        let logits = p.forward_logits(&tokens).unwrap();
        assert_eq!(logits.shape(), &[8, 11]);
        for t in 1..=tokens.len() {
            let expect = reference_last_logits(&p, &tokens[..t]);
            for (a, b) in logits.row(t - 1).iter().zip(&expect) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn single_token_vocabulary_is_certain() {
    let cfg = ModelConfig {
        vocab_size: 1,
        ..tiny(true)
    };
    let p = model::<f64>(cfg, 1);
    let lp = p.log_probs(&[0, 0, 0]).unwrap();
    assert!(lp.data().iter().all(|&v| v == 0.0));
    assert_eq!(sequence_logprob(&p, &[0], &[0, 0]).unwrap(), 0.0);
}

#[test]
fn appending_tokens_keeps_earlier_logits() {
    let p = model::<f32>(tiny(true), 5);
    let short = p.forward_logits(&[1, 4, 6]).unwrap();
    let long = p.forward_logits(&[1, 4, 6, 3, 9, 2]).unwrap();
    assert_eq!(short.data(), &long.data()[..short.numel()]);
}

#[test]
fn contract_errors() {
    let p = model::<f32>(tiny(true), 5);
    assert!(matches!(p.forward_logits(&[1; 13]), Err(Error::Contract(_))));
    assert!(matches!(p.forward_logits(&[]), Err(Error::Contract(_))));
    assert!(matches!(sequence_logprob(&p, &[1], &[]), Err(Error::Contract(_))));
    let bad = ModelConfig {
        n_heads: 3,
        ..tiny(true)
    };
    assert!(matches!(ModelParams::<f32>::init(bad, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    let target = Arc::new(model::<f32>(tiny(true), 5));
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(build_assistant(target.clone(), 2, 2, 4.0, rng), Err(Error::Contract(_))));
    assert!(matches!(build_assistant(target.clone(), 0, 2, 4.0, rng), Err(Error::Contract(_))));
    assert!(matches!(build_assistant(target, 1, 0, 4.0, rng), Err(Error::Config(_))));
}

struct Uniform(usize);

impl LogitSource for Uniform {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn logits(&self, tokens: &[usize]) -> uld_core::Result<Tensor<f64>> {
        Ok(Tensor::zeros(&[tokens.len(), self.0]))
    }
}

#[test]
fn sequence_logprob_oracles() {
    assert_abs_diff_eq!(sequence_logprob(&Uniform(4), &[1], &[3]).unwrap(), -(4f64.ln()), epsilon = 1e-12);
    assert_abs_diff_eq!(-(4f64.ln()), -1.3863, epsilon = 1e-4);

    let p = model::<f64>(tiny(true), 9);
    let (prompt, answer) = ([1usize, 4, 6], [8usize, 2]);
    let lsm = |ctx: &[usize], next: usize| {
        let logits = p.forward_logits(ctx).unwrap();
        let row = logits.row(ctx.len() - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row[next] - m - z.ln()
    };
    let manual = lsm(&prompt, 8) + lsm(&[1, 4, 6, 8], 2);
    assert_abs_diff_eq!(sequence_logprob(&p, &prompt, &answer).unwrap(), manual, epsilon = 1e-6);
    let per = answer_token_logprobs(&p, &prompt, &answer).unwrap();
    assert_eq!(per.len(), 2);
}

#[test]
fn parameter_counts() {
    for rope in [true, false] {
        let p = model::<f32>(tiny(rope), 1);
        let direct: usize = p.tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(p.count_total(), direct);
        assert_eq!(p.config.param_count(), direct);
        assert_eq!(p.count_trainable(), direct);
        assert_eq!(p.clone().frozen().count_trainable(), 0);
    }
    let ad = LoraAdapter::<f32>::new(16, 16, 3, 6.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ad.numel(), 2 * 16 * 3);
}

fn assistant_count_formula(cfg: &ModelConfig, k: usize, r: usize) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    k * r * (4 * (d + d) + (d + f) + (f + d))
}

#[test]
fn assistant_trainable_count() {
    let cfg = ModelConfig::default();
    let target = Arc::new(model::<f32>(cfg.clone(), 1).frozen());
    let a = build_assistant(target.clone(), 1, 4, 8.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let enumerated: usize = a.named_tensors().iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(a.count_trainable(), enumerated);
    assert_eq!(a.count_trainable(), assistant_count_formula(&cfg, 1, 4));
    assert!((a.count_trainable() as f64) / (target.count_total() as f64) < 0.05);
    assert_eq!(target.count_trainable(), 0);

    // Independent of how many target layers lie beyond K.
    let deeper = Arc::new(
        model::<f32>(
            ModelConfig {
                n_layers: 8,
                ..cfg
            },
            1,
        )
        .frozen(),
    );
    let b = build_assistant(deeper, 1, 4, 8.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.count_trainable(), b.count_trainable());
}

#[test]
fn fresh_assistant_equals_truncated_target() {
    let target = Arc::new(model::<f32>(tiny(true), 3).frozen());
    let a = build_assistant(target.clone(), 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(a.layers.iter().all(|l| l.adapters.iter().all(|ad| ad.b.data().iter().all(|&v| v == 0.0))));
    assert!(a.layers[0].adapters[0].a.data().iter().any(|&v| v != 0.0));
    let tokens = [1, 2, 5, 7, 3];
    let got = a.forward(&tokens).unwrap();
    assert_eq!(got.data(), target.forward_prefix(&tokens, 1).unwrap().data());
    assert_eq!(got.data(), target.truncated(1).unwrap().forward_logits(&tokens).unwrap().data());
}

#[test]
fn one_gradient_step_moves_the_assistant() {
    let target = Arc::new(model::<f64>(tiny(true), 3).frozen());
    let before = target.as_ref().clone();
    let mut a = build_assistant(target.clone(), 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tokens = [1, 2, 5, 7, 3];
    let grads: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let (base, ads) = a.register(&tape);
        let logits = base.forward(&target.config, &tokens[..4], 1, Some(&ads)).unwrap();
        let loss = logits.cross_entropy(&tokens[1..]).unwrap();
        tape.backward(loss).unwrap();
        for leaf in base.leaves() {
            assert!(tape.grad(leaf).is_none());
        }
        ads.iter()
            .flat_map(|l| l.pairs.iter().flat_map(|(x, y)| [*x, *y]))
            .map(|v| tape.grad(v).unwrap().into_vec())
            .collect()
    };
    for (t, g) in a.tensors_mut().into_iter().zip(&grads) {
        for (v, g) in t.data_mut().iter_mut().zip(g) {
            *v -= 0.1 * g;
        }
    }
    let out = a.forward(&tokens).unwrap();
    let base = target.forward_prefix(&tokens, 1).unwrap();
    assert!(out.data().iter().zip(base.data()).any(|(x, y)| x != y));
    assert!(target.bitwise_eq(&before));
}

#[test]
fn model_checkpoint_round_trip() {
    let p = model::<f32>(tiny(false), 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&p, &path).unwrap();
    let back: ModelParams<f32> = load_model(&path).unwrap();
    assert_eq!(back.config, p.config);
    assert!(back.bitwise_eq(&p));
    assert_eq!(back.count_trainable(), 0);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"ULDC");
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(checkpoint_from_bytes::<f32>(&wrong), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(checkpoint_from_bytes::<f32>(&version), Err(Error::Format { offset: 4, .. })));
    let cut = bytes.len() - 3;
    match checkpoint_from_bytes::<f32>(&bytes[..cut]) {
        Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
        other => panic!("expected format error, got {:?}", other.err()),
    }
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(checkpoint_from_bytes::<f32>(&extra), Err(Error::Format { .. })));
}

#[test]
fn assistant_checkpoint_layout() {
    let cfg = tiny(true);
    let target = Arc::new(model::<f32>(cfg.clone(), 3).frozen());
    let mut a = build_assistant(target.clone(), 1, 3, 6.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for t in a.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += i as f32 * 1e-3;
        }
    }
    let bytes = assistant_to_bytes(&a).unwrap();
    assert_eq!(&bytes[..4], b"ULDA");
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + cfg_len]).unwrap();
    assert_eq!(header["k"], 1);
    assert_eq!(header["rank"], 3);
    assert_eq!(header["alpha"], 6.0);
    let names = a.named_tensors();
    let per_tensor: usize = names.iter().map(|(n, t)| 2 + n.len() + 1 + 1 + 8 * t.shape().len()).sum();
    let values = assistant_count_formula(&cfg, 1, 3);
    assert_eq!(bytes.len(), 12 + cfg_len + 4 + per_tensor + 4 * values);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_assistant(&a, &path).unwrap();
    let back = load_assistant(&path, target.clone()).unwrap();
    for ((n1, t1), (n2, t2)) in back.named_tensors().iter().zip(a.named_tensors().iter()) {
        assert_eq!(n1, n2);
        assert!(t1.bitwise_eq(t2));
    }
    assert_eq!(back.count_trainable(), a.count_trainable());
    assert!(matches!(load_model::<f32>(&path), Err(Error::Format { .. })));
    let other = Arc::new(model::<f32>(tiny(false), 3));
    assert!(load_assistant(&path, other).is_err());
    assert!(matches!(checkpoint_from_bytes::<f32>(&model_to_bytes(&*target).unwrap()), Ok(Checkpoint::Model(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn causality_for_any_extension(
        prefix in prop::collection::vec(0usize..11, 1..6),
        ext in prop::collection::vec(0usize..11, 0..6),
        seed in 0u64..50,
    ) {
        let p = model::<f32>(tiny(seed % 2 == 0), seed);
        let short = p.forward_logits(&prefix).unwrap();
        let full: Vec<usize> = prefix.iter().chain(&ext).copied().collect();
        let long = p.forward_logits(&full).unwrap();
        for (a, b) in short.data().iter().zip(long.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_init_neutrality(tokens in prop::collection::vec(0usize..11, 1..10), seed in 0u64..50) {
        let target = Arc::new(model::<f32>(tiny(true), seed).frozen());
        let a = build_assistant(target.clone(), 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (x, y) = (a.forward(&tokens).unwrap(), target.forward_prefix(&tokens, 1).unwrap());
        prop_assert_eq!(x.data(), y.data());
    }
}
