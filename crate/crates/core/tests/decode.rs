use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uld_core::data::{generate_corpus, CorpusConfig, EOS};
use uld_core::decode::*;
use uld_core::model::{build_assistant, LogitSource, ModelConfig, ModelParams};
use uld_core::tensor::Tensor;
use uld_core::Error;

/// Same logit row at every position.
struct Fixed(Vec<f64>);

impl LogitSource for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }
    fn logits(&self, tokens: &[usize]) -> uld_core::Result<Tensor<f64>> {
        let data = tokens.iter().flat_map(|_| self.0.iter().copied()).collect();
        Tensor::new(vec![tokens.len(), self.0.len()], data)
    }
}

/// Logits that depend on the previous token only.
struct Table(Vec<Vec<f64>>);

impl LogitSource for Table {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn logits(&self, tokens: &[usize]) -> uld_core::Result<Tensor<f64>> {
        let data = tokens.iter().flat_map(|&t| self.0[t].iter().copied()).collect();
        Tensor::new(vec![tokens.len(), self.vocab_size()], data)
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn tiny_model(seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        vocab_size: 9,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 12,
        rope: true,
    };
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn zero_alpha_is_identity_on_the_support() {
    let t = [2.0, 0.5, -1.0, 3.0];
    let a = [9.0, -4.0, 1.0, 0.0];
    let out = combine_logits(&t, &a, 0.0, 1e-9).unwrap();
    assert_eq!(out, t.to_vec());
    let out = combine_unfiltered(&t, &a, 0.0).unwrap();
    assert_eq!(out, t.to_vec());
}

#[test]
fn constant_assistant_preserves_target_distribution() {
    let t = [1.0, 2.5, -0.3, 0.7, 2.4];
    let a = [3.0; 5];
    let out = combine_logits(&t, &a, 0.75, 1e-3).unwrap();
    assert_eq!(argmax(&out), argmax(&t));
    let ps = softmax(&out);
    let pt = softmax(&t);
    for (x, y) in ps.iter().zip(&pt) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
}

#[test]
fn full_cancellation_gives_uniform() {
    let out = combine_unfiltered(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
    let p = softmax(&out);
    assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
}

#[test]
fn filter_drops_implausible_tokens() {
    // p ∝ e^l; token 2 is e^-5 ≈ 0.0067 of the max, below 1e-2.
    let t = [0.0, -1.0, -5.0];
    let out = combine_logits(&t, &[0.0; 3], 0.75, 1e-2).unwrap();
    assert!(out[0].is_finite() && out[1].is_finite());
    assert_eq!(out[2], f64::NEG_INFINITY);
    // With rate 1 only the maximum survives.
    let out = combine_logits(&t, &[5.0, -5.0, 0.0], 10.0, 1.0).unwrap();
    assert_eq!(argmax(&out), 0);
    assert_eq!(out.iter().filter(|v| v.is_finite()).count(), 1);
}

#[test]
fn assistant_can_flip_the_argmax() {
    let t = [2.0, 1.8, -3.0];
    let a = [4.0, 0.0, 0.0];
    let out = combine_logits(&t, &a, 0.75, 1e-2).unwrap();
    assert_eq!(argmax(&t), 0);
    assert_eq!(argmax(&out), 1);
}

#[test]
fn offset_identities() {
    let t = [0.3, -1.2, 2.0, 0.1];
    let phi = [1.0, 0.0, -2.0, 0.5];
    let base = softmax(&t).iter().map(|p| p.ln()).collect::<Vec<_>>();
    // φ = φ⁽⁰⁾ leaves the target unchanged.
    let out = offset_combine(&t, &phi, &phi, 1.0).unwrap();
    for (x, y) in out.iter().zip(&base) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-7);
    }
    // α = 0 as well.
    let out = offset_combine(&t, &phi, &[0.0, 5.0, 1.0, 2.0], 0.0).unwrap();
    for (x, y) in out.iter().zip(&base) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-7);
    }
    // Two tokens: log-odds shift by α·Δ with Δ = 1.
    let out = offset_combine(&[1.0, 0.0], &[2.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
    assert_abs_diff_eq!(out[0] - out[1], 2.0, epsilon = 1e-9);
    let p: f64 = out.iter().map(|x| x.exp()).sum();
    assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
}

#[test]
fn mismatched_vocabularies_are_contract_errors() {
    assert!(matches!(combine_logits(&[0.0; 3], &[0.0; 4], 0.5, 0.1), Err(Error::Contract(_))));
    assert!(matches!(combine_unfiltered(&[0.0; 3], &[0.0; 2], 0.5), Err(Error::Contract(_))));
    assert!(matches!(offset_combine(&[0.0; 3], &[0.0; 3], &[0.0; 2], 0.5), Err(Error::Contract(_))));
    let (a, b) = (Fixed(vec![0.0; 3]), Fixed(vec![0.0; 4]));
    assert!(matches!(Combined::uld(&a, &b, 0.5, 0.1), Err(Error::Contract(_))));
    assert!(matches!(Combined::offset(&a, &a, &b, 0.5), Err(Error::Contract(_))));
}

#[test]
fn bad_combiner_settings_are_config_errors() {
    let a = Fixed(vec![0.0; 3]);
    assert!(matches!(Combined::uld(&a, &a, -0.1, 0.1), Err(Error::Config(_))));
    assert!(matches!(Combined::uld(&a, &a, 0.5, 0.0), Err(Error::Config(_))));
    assert!(matches!(Combined::uld(&a, &a, 0.5, 1.5), Err(Error::Config(_))));
}

#[test]
fn combined_scoring_keeps_filtered_mass_and_stays_finite() {
    let t = Fixed(vec![5.0, 0.0, -20.0]);
    let a = Fixed(vec![1.0, 1.0, 1.0]);
    let c = Combined::uld(&t, &a, 0.75, 1e-2).unwrap();
    let logits = c.logits(&[0, 1]).unwrap();
    assert_eq!(logits.row(0)[1], f64::NEG_INFINITY);
    assert_eq!(logits.row(0)[2], f64::NEG_INFINITY);
    let lp = c.log_probs(&[0, 1]).unwrap();
    assert!(lp.is_finite());
    // token 0 is the only survivor of the filter, so it scores log 1
    assert_abs_diff_eq!(lp.row(1)[0], 0.0, epsilon = 1e-12);
    let unfiltered = softmax(&[5.0 - 0.75, -0.75, -20.75]);
    for k in 1..3 {
        assert_abs_diff_eq!(lp.row(1)[k].exp(), unfiltered[k], epsilon = 1e-12);
    }
}

#[test]
fn greedy_follows_the_table_and_stops_at_eos() {
    // 0 → 3 → 4 → eos
    let mut rows = vec![vec![0.0; 5]; 5];
    rows[0][3] = 1.0;
    rows[3][4] = 1.0;
    rows[4][EOS] = 1.0;
    let src = Table(rows);
    let out = greedy_decode(&src, &[0], 10, true).unwrap();
    assert_eq!(out.tokens, vec![3, 4]);
    assert_eq!(out.stop, StopReason::Eos);
    assert_eq!(out.logits.unwrap().len(), 3);
    let out = greedy_decode(&src, &[0], 2, false).unwrap();
    assert_eq!(out.tokens, vec![3]);
    assert_eq!(out.stop, StopReason::MaxLength);
    assert!(matches!(greedy_decode(&src, &[], 4, false), Err(Error::Contract(_))));
    assert!(matches!(greedy_decode(&src, &[0, 3], 2, false), Err(Error::Contract(_))));
}

#[test]
fn argmax_ties_go_to_the_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax(&[f64::NEG_INFINITY, -1.0]), 1);
}

#[test]
fn identity_and_zero_alpha_decode_like_the_target() {
    let target = Arc::new(tiny_model(3));
    let assistant = build_assistant(target.clone(), 1, 2, 4.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let prompt = [1, 5, 6];
    let plain = greedy_decode(target.as_ref(), &prompt, 12, false).unwrap();
    let id = Combined::identity(target.as_ref());
    assert_eq!(greedy_decode(&id, &prompt, 12, false).unwrap(), plain);
    let zero = Combined::uld(target.as_ref(), &assistant, 0.0, 1e-12).unwrap();
    assert_eq!(greedy_decode(&zero, &prompt, 12, false).unwrap().tokens, plain.tokens);
}

#[test]
fn perplexity_oracles() {
    let one = Fixed(vec![0.7]);
    assert_abs_diff_eq!(perplexity(&one, &[0, 0, 0]).unwrap(), 1.0, epsilon = 1e-12);
    let uniform = Fixed(vec![0.0; 4]);
    assert_abs_diff_eq!(perplexity(&uniform, &[0, 1, 2, 3]).unwrap(), 4.0, epsilon = 1e-9);
    assert_abs_diff_eq!(answer_perplexity(&uniform, &[0], &[1, 2]).unwrap(), 4.0, epsilon = 1e-9);
    assert!(matches!(perplexity(&uniform, &[0]), Err(Error::Contract(_))));
}

#[test]
fn score_records_round_trip_through_jsonl() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let tok = corpus.tokenizer();
    let src = Fixed(vec![0.0; tok.len()]);
    let qa = corpus.forget()[0];
    let rec = score_qa(&src, &tok, qa, "forget", 40).unwrap();
    // Uniform source: every mean log-probability is −ln V.
    let expect = -(tok.len() as f64).ln();
    assert_abs_diff_eq!(rec.answer_logprobs.truth, expect, epsilon = 1e-9);
    assert_eq!(rec.answer_logprobs.paraphrased.len(), qa.paraphrased_answers.len());
    assert_eq!(rec.answer_logprobs.perturbed.len(), qa.perturbed_answers.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.jsonl");
    write_jsonl(&path, &[rec.clone(), rec.clone()]).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), vec![rec.clone(), rec]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().contains("\"true\":"));
}

proptest! {
    #[test]
    fn stricter_filter_keeps_a_subset(
        t in prop::collection::vec(-5.0f64..5.0, 2..12),
        r1 in 1e-4f64..1.0,
        r2 in 1e-4f64..1.0,
    ) {
        let a = vec![0.0; t.len()];
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let loose = combine_logits(&t, &a, 0.5, lo).unwrap();
        let strict = combine_logits(&t, &a, 0.5, hi).unwrap();
        for (l, s) in loose.iter().zip(&strict) {
            prop_assert!(!s.is_finite() || l.is_finite());
        }
        prop_assert!(strict.iter().any(|v| v.is_finite()));
    }

    #[test]
    fn offset_output_is_a_distribution(
        t in prop::collection::vec(-5.0f64..5.0, 3),
        a in prop::collection::vec(-5.0f64..5.0, 3),
        r in prop::collection::vec(-5.0f64..5.0, 3),
        alpha in 0.0f64..3.0,
    ) {
        let out = offset_combine(&t, &a, &r, alpha).unwrap();
        let s: f64 = out.iter().map(|x| x.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }
}
