//! Evaluation metrics: ROUGE-L, normalized answer probability, truth ratio,
//! the two-sample KS test behind forget quality, and model utility.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, QaPair, Tokenizer};
use crate::decode::{score_qa, ScoreRecord};
use crate::error::{Error, Result};
use crate::model::{sequence_logprob, LogitSource};

/// Lowercased alphanumeric words, the unit ROUGE-L compares.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS recall over reference tokens; 0 for an empty reference.
pub fn rouge_l_tokens<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    lcs_len(reference, hypothesis) as f64 / reference.len() as f64
}

pub fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    rouge_l_tokens(&rouge_tokens(reference), &rouge_tokens(hypothesis))
}

/// `p(answer|prompt)^(1/|answer|)`.
pub fn answer_prob(source: &dyn LogitSource, prompt: &[usize], answer: &[usize]) -> Result<f64> {
    Ok((sequence_logprob(source, prompt, answer)? / answer.len() as f64).exp())
}

pub const TRUTH_RATIO_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRatio {
    pub value: f64,
    /// The denominator underflowed and was clamped.
    pub clamped: bool,
}

/// Mean normalized probability of correct answers over mean normalized
/// probability of incorrect ones, from length-normalized log-probabilities.
pub fn truth_ratio(paraphrased: &[f64], perturbed: &[f64]) -> Result<TruthRatio> {
    if paraphrased.is_empty() || perturbed.is_empty() {
        return Err(Error::Contract("truth ratio needs correct and incorrect answers".into()));
    }
    let mean = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>() / v.len() as f64;
    let num = mean(paraphrased);
    let den = mean(perturbed);
    let clamped = den < TRUTH_RATIO_FLOOR;
    Ok(TruthRatio {
        value: num / den.max(TRUTH_RATIO_FLOOR),
        clamped,
    })
}

/// Bounded truth-ratio score `max(0, 1 − 1/R)`.
pub fn truth_ratio_score(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / r).max(0.0)
    }
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=1_000_000u64 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-10 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("KS test needs two nonempty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = (n * m) as f64 / (n + m) as f64;
    let se = en.sqrt();
    let lambda = (se + 0.12 + 0.11 / se) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// KS p-value between the unlearned and retain-model truth ratios on D_f.
pub fn forget_quality(unlearned: &[f64], retain_model: &[f64]) -> Result<f64> {
    Ok(ks_two_sample(unlearned, retain_model)?.p_value)
}

/// Harmonic mean of values in `[0, 1]`; 0 if any value is 0.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("harmonic mean of nothing".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("utility component {v} outside [0, 1]")));
    }
    if values.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Harmonic mean of the nine (group × metric) values.
pub fn model_utility(values: &[f64]) -> Result<f64> {
    if values.len() != 9 {
        return Err(Error::Contract(format!("model utility takes 9 values, got {}", values.len())));
    }
    harmonic_mean(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub rouge: f64,
    pub answer_prob: f64,
    pub truth_ratio_score: f64,
    /// Token-averaged answer cross-entropy.
    pub ce: f64,
}

impl GroupMetrics {
    pub fn from_records(group: &str, records: &[ScoreRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract(format!("no records for group {group}")));
        }
        let n = records.len() as f64;
        let mut tr = 0.0;
        for r in records {
            tr += truth_ratio_score(record_truth_ratio(r)?.value);
        }
        Ok(Self {
            group: group.to_string(),
            rouge: records.iter().map(|r| rouge_l(&r.reference, &r.generation)).sum::<f64>() / n,
            answer_prob: records.iter().map(|r| r.answer_logprobs.truth.exp()).sum::<f64>() / n,
            truth_ratio_score: tr / n,
            ce: token_ce(records),
        })
    }
}

pub fn record_truth_ratio(r: &ScoreRecord) -> Result<TruthRatio> {
    truth_ratio(&r.answer_logprobs.paraphrased, &r.answer_logprobs.perturbed)
}

/// Token-averaged cross-entropy of the original answers.
pub fn token_ce(records: &[ScoreRecord]) -> f64 {
    let tokens: usize = records.iter().map(|r| r.answer_tokens).sum();
    -records.iter().map(ScoreRecord::true_logprob_sum).sum::<f64>() / tokens.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_quality: f64,
    pub model_utility: f64,
    /// Holdout, famous and facts groups, in that order.
    pub groups: Vec<GroupMetrics>,
    pub forget_rouge: f64,
    pub forget_ce: f64,
    pub forget_truth_ratios: Vec<f64>,
    /// Number of forget truth ratios whose denominator was clamped.
    pub clamped_ratios: usize,
    /// `exp` of the held-out retain answer cross-entropy.
    pub perplexity: f64,
}

impl EvalReport {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn holdout_ce(&self) -> f64 {
        self.group("holdout").map_or(f64::NAN, |g| g.ce)
    }

    pub fn retain_rouge(&self) -> f64 {
        self.group("holdout").map_or(f64::NAN, |g| g.rouge)
    }

    /// Assemble from scoring dumps. `reference_ratios` are the retain model's
    /// truth ratios on the same forget examples; without them forget quality
    /// is reported as NaN.
    pub fn from_records(
        forget: &[ScoreRecord],
        groups: &[(&str, Vec<ScoreRecord>)],
        reference_ratios: Option<&[f64]>,
    ) -> Result<Self> {
        let mut ratios = Vec::with_capacity(forget.len());
        let mut clamped = 0;
        for r in forget {
            let tr = record_truth_ratio(r)?;
            clamped += usize::from(tr.clamped);
            ratios.push(tr.value);
        }
        let metrics = groups
            .iter()
            .map(|(name, recs)| GroupMetrics::from_records(name, recs))
            .collect::<Result<Vec<_>>>()?;
        let nine: Vec<f64> = metrics
            .iter()
            .flat_map(|g| [g.rouge, g.answer_prob, g.truth_ratio_score])
            .collect();
        let utility = if nine.len() == 9 { model_utility(&nine)? } else { harmonic_mean(&nine)? };
        let fq = match reference_ratios {
            Some(r) => forget_quality(&ratios, r)?,
            None => f64::NAN,
        };
        let holdout_ce = metrics.iter().find(|g| g.group == "holdout").map_or(f64::NAN, |g| g.ce);
        Ok(Self {
            forget_quality: fq,
            model_utility: utility,
            forget_rouge: forget.iter().map(|r| rouge_l(&r.reference, &r.generation)).sum::<f64>()
                / forget.len().max(1) as f64,
            forget_ce: token_ce(forget),
            forget_truth_ratios: ratios,
            clamped_ratios: clamped,
            perplexity: holdout_ce.exp(),
            groups: metrics,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Scoring dumps for the forget split and the three retain groups.
pub struct Scores {
    pub forget: Vec<ScoreRecord>,
    pub groups: Vec<(&'static str, Vec<ScoreRecord>)>,
}

impl Scores {
    pub fn all(&self) -> Vec<ScoreRecord> {
        let mut out = self.forget.clone();
        for (_, g) in &self.groups {
            out.extend(g.iter().cloned());
        }
        out
    }

    pub fn report(&self, reference_ratios: Option<&[f64]>) -> Result<EvalReport> {
        let groups: Vec<(&str, Vec<ScoreRecord>)> = self.groups.iter().map(|(n, g)| (*n, g.clone())).collect();
        EvalReport::from_records(&self.forget, &groups, reference_ratios)
    }
}

fn score_all(source: &dyn LogitSource, tok: &Tokenizer, qas: &[&QaPair], split: &str, max_len: usize) -> Result<Vec<ScoreRecord>> {
    qas.iter().map(|qa| score_qa(source, tok, qa, split, max_len)).collect()
}

/// Score `source` on the forget split and every evaluation group.
pub fn score_corpus(source: &dyn LogitSource, tok: &Tokenizer, corpus: &Corpus, max_len: usize) -> Result<Scores> {
    let forget = score_all(source, tok, &corpus.forget(), "forget", max_len)?;
    let groups = corpus
        .eval_groups()
        .into_iter()
        .map(|(name, qas)| Ok((name, score_all(source, tok, &qas, name, max_len)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scores { forget, groups })
}

/// Flat row of report.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub epoch: usize,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub forget_rouge: f64,
    pub retain_rouge: f64,
    pub forget_ce: f64,
    pub holdout_ce: f64,
    pub perplexity: f64,
    pub holdout_answer_prob: f64,
    pub holdout_truth_ratio: f64,
    pub famous_rouge: f64,
    pub famous_answer_prob: f64,
    pub famous_truth_ratio: f64,
    pub facts_rouge: f64,
    pub facts_answer_prob: f64,
    pub facts_truth_ratio: f64,
}

impl ReportRow {
    pub fn new(model: &str, epoch: usize, r: &EvalReport) -> Self {
        let g = |name: &str| r.group(name).cloned();
        let pick = |name: &str, f: fn(&GroupMetrics) -> f64| g(name).map_or(f64::NAN, |m| f(&m));
        Self {
            model: model.to_string(),
            epoch,
            forget_quality: r.forget_quality,
            model_utility: r.model_utility,
            forget_rouge: r.forget_rouge,
            retain_rouge: r.retain_rouge(),
            forget_ce: r.forget_ce,
            holdout_ce: r.holdout_ce(),
            perplexity: r.perplexity,
            holdout_answer_prob: pick("holdout", |m| m.answer_prob),
            holdout_truth_ratio: pick("holdout", |m| m.truth_ratio_score),
            famous_rouge: pick("famous", |m| m.rouge),
            famous_answer_prob: pick("famous", |m| m.answer_prob),
            famous_truth_ratio: pick("famous", |m| m.truth_ratio_score),
            facts_rouge: pick("facts", |m| m.rouge),
            facts_answer_prob: pick("facts", |m| m.answer_prob),
            facts_truth_ratio: pick("facts", |m| m.truth_ratio_score),
        }
    }
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
