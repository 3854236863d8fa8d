//! Inference-time logit arithmetic, greedy decoding and sequence scoring.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{QaPair, Tokenizer, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{answer_token_logprobs, LogitSource};
use crate::tensor::kernels::log_softmax_into;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerMode {
    Identity,
    Uld,
    Offset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinerConfig {
    pub mode: CombinerMode,
    pub alpha: f64,
    /// Keep tokens with `p_target ≥ filter_rate · max p_target`.
    pub filter_rate: f64,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            mode: CombinerMode::Uld,
            alpha: 0.75,
            filter_rate: 1e-2,
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if !(self.filter_rate > 0.0 && self.filter_rate <= 1.0) {
            return Err(Error::Config(format!("filter_rate {} must lie in (0, 1]", self.filter_rate)));
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "vocabulary mismatch: {} vs {} logits",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `target − α·assistant` on the plausible set, `-inf` elsewhere.
pub fn combine_logits(target: &[f64], assistant: &[f64], alpha: f64, filter_rate: f64) -> Result<Vec<f64>> {
    same_len(target, assistant)?;
    let max = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // p_y ≥ r·p_max  ⇔  l_y ≥ l_max + ln r
    let cut = max + filter_rate.ln();
    Ok(target
        .iter()
        .zip(assistant)
        .map(|(&t, &a)| if t >= cut { t - alpha * a } else { f64::NEG_INFINITY })
        .collect())
}

/// `target − α·assistant` on every token.
pub fn combine_unfiltered(target: &[f64], assistant: &[f64], alpha: f64) -> Result<Vec<f64>> {
    same_len(target, assistant)?;
    Ok(target.iter().zip(assistant).map(|(&t, &a)| t - alpha * a).collect())
}

/// Per-token scoring rule of the ULD composition: filtered log-softmax on
/// the plausible set, unfiltered log-softmax elsewhere.
pub fn scoring_log_probs(target: &[f64], assistant: &[f64], alpha: f64, filter_rate: f64) -> Result<Vec<f64>> {
    let kept = lsm(&combine_logits(target, assistant, alpha, filter_rate)?);
    let all = lsm(&combine_unfiltered(target, assistant, alpha)?);
    Ok(kept
        .into_iter()
        .zip(all)
        .map(|(k, u)| if k.is_finite() { k } else { u })
        .collect())
}

fn lsm(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    log_softmax_into(row, &mut out);
    out
}

/// `log_softmax(log p_target + α·(log p_φ − log p_φ⁽⁰⁾))`.
pub fn offset_combine(target: &[f64], assistant: &[f64], reference: &[f64], alpha: f64) -> Result<Vec<f64>> {
    same_len(target, assistant)?;
    same_len(target, reference)?;
    let (t, a, r) = (lsm(target), lsm(assistant), lsm(reference));
    let raw: Vec<f64> = (0..t.len()).map(|i| t[i] + alpha * (a[i] - r[i])).collect();
    Ok(lsm(&raw))
}

fn row_map(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Tensor<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.numel());
    for r in 0..a.rows() {
        out.extend(f(a.row(r), b.row(r))?);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// The unlearned model: a target composed with an assistant.
pub struct Combined<'a> {
    pub target: &'a dyn LogitSource,
    pub assistant: Option<&'a dyn LogitSource>,
    /// φ⁽⁰⁾ for offset mode.
    pub reference: Option<&'a dyn LogitSource>,
    pub cfg: CombinerConfig,
}

impl<'a> Combined<'a> {
    pub fn identity(target: &'a dyn LogitSource) -> Self {
        Self {
            target,
            assistant: None,
            reference: None,
            cfg: CombinerConfig {
                mode: CombinerMode::Identity,
                ..Default::default()
            },
        }
    }

    pub fn uld(target: &'a dyn LogitSource, assistant: &'a dyn LogitSource, alpha: f64, filter_rate: f64) -> Result<Self> {
        let cfg = CombinerConfig {
            mode: CombinerMode::Uld,
            alpha,
            filter_rate,
        };
        cfg.validate()?;
        if target.vocab_size() != assistant.vocab_size() {
            return Err(Error::Contract("target and assistant must share a vocabulary".into()));
        }
        Ok(Self {
            target,
            assistant: Some(assistant),
            reference: None,
            cfg,
        })
    }

    pub fn offset(
        target: &'a dyn LogitSource,
        assistant: &'a dyn LogitSource,
        reference: &'a dyn LogitSource,
        alpha: f64,
    ) -> Result<Self> {
        let cfg = CombinerConfig {
            mode: CombinerMode::Offset,
            alpha,
            filter_rate: 1.0,
        };
        cfg.validate()?;
        let v = target.vocab_size();
        if assistant.vocab_size() != v || reference.vocab_size() != v {
            return Err(Error::Contract("offset models must share a vocabulary".into()));
        }
        Ok(Self {
            target,
            assistant: Some(assistant),
            reference: Some(reference),
            cfg,
        })
    }

    fn parts(&self, tokens: &[usize]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let a = self
            .assistant
            .ok_or_else(|| Error::Contract(format!("{:?} mode needs an assistant", self.cfg.mode)))?;
        Ok((self.target.logits(tokens)?, a.logits(tokens)?))
    }

    fn offset_rows(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        let (t, a) = self.parts(tokens)?;
        let r = self
            .reference
            .ok_or_else(|| Error::Contract("offset mode needs a reference assistant".into()))?
            .logits(tokens)?;
        if r.shape() != t.shape() || a.shape() != t.shape() {
            return Err(Error::Contract("offset logit shapes differ".into()));
        }
        let mut out = Vec::with_capacity(t.numel());
        for i in 0..t.rows() {
            out.extend(offset_combine(t.row(i), a.row(i), r.row(i), self.cfg.alpha)?);
        }
        Tensor::new(t.shape().to_vec(), out)
    }
}

impl LogitSource for Combined<'_> {
    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    /// Decoding logits: filtered for ULD, so some entries are `-inf`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        match self.cfg.mode {
            CombinerMode::Identity => self.target.logits(tokens),
            CombinerMode::Uld => {
                let (t, a) = self.parts(tokens)?;
                row_map(&t, &a, |x, y| combine_logits(x, y, self.cfg.alpha, self.cfg.filter_rate))
            }
            CombinerMode::Offset => self.offset_rows(tokens),
        }
    }

    /// Scoring log-probabilities: tokens on the plausible set are scored
    /// under the filtered composition, filtered-out tokens under the
    /// unfiltered one, so every entry is finite.
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        match self.cfg.mode {
            CombinerMode::Identity => crate::tensor::log_softmax(&self.target.logits(tokens)?),
            CombinerMode::Uld => {
                let (t, a) = self.parts(tokens)?;
                row_map(&t, &a, |x, y| scoring_log_probs(x, y, self.cfg.alpha, self.cfg.filter_rate))
            }
            CombinerMode::Offset => self.offset_rows(tokens),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Generated tokens, excluding the prompt and the final `<eos>`.
    pub tokens: Vec<usize>,
    pub stop: StopReason,
    /// Per-step decoding logits when requested.
    pub logits: Option<Vec<Vec<f64>>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until `<eos>` or a total length of `max_len` tokens.
pub fn greedy_decode(source: &dyn LogitSource, prompt: &[usize], max_len: usize, keep_logits: bool) -> Result<DecodeResult> {
    if prompt.is_empty() || prompt.len() >= max_len {
        return Err(Error::Contract(format!(
            "prompt of {} tokens with max_len {max_len}",
            prompt.len()
        )));
    }
    let mut seq = prompt.to_vec();
    let mut kept = keep_logits.then(Vec::new);
    while seq.len() < max_len {
        let logits = source.logits(&seq)?;
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        if let Some(k) = kept.as_mut() {
            k.push(last.to_vec());
        }
        if next == EOS {
            return Ok(DecodeResult {
                tokens: seq[prompt.len()..].to_vec(),
                stop: StopReason::Eos,
                logits: kept,
            });
        }
        seq.push(next);
    }
    Ok(DecodeResult {
        tokens: seq[prompt.len()..].to_vec(),
        stop: StopReason::MaxLength,
        logits: kept,
    })
}

/// `exp(mean next-token NLL)` over a whole sequence.
pub fn perplexity(source: &dyn LogitSource, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Contract("perplexity needs at least two tokens".into()));
    }
    let lp = source.log_probs(&tokens[..tokens.len() - 1])?;
    let nll: f64 = tokens[1..].iter().enumerate().map(|(i, &t)| -lp.row(i)[t]).sum();
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

/// Perplexity of an answer conditioned on its prompt.
pub fn answer_perplexity(source: &dyn LogitSource, prompt: &[usize], answer: &[usize]) -> Result<f64> {
    let lp = answer_token_logprobs(source, prompt, answer)?;
    Ok((-lp.iter().sum::<f64>() / lp.len() as f64).exp())
}

/// Length-normalized answer log-probabilities for one QA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerLogprobs {
    /// Mean per-token log-probability of the original answer.
    #[serde(rename = "true")]
    pub truth: f64,
    pub paraphrased: Vec<f64>,
    pub perturbed: Vec<f64>,
}

/// One line of the scoring dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub split: String,
    pub prompt: String,
    pub reference: String,
    pub generation: String,
    pub answer_logprobs: AnswerLogprobs,
    /// Token count of the original answer including `<eos>`.
    pub answer_tokens: usize,
}

impl ScoreRecord {
    /// Summed log-probability of the original answer.
    pub fn true_logprob_sum(&self) -> f64 {
        self.answer_logprobs.truth * self.answer_tokens as f64
    }
}

fn prompt_ids(tok: &Tokenizer, question: &str) -> Vec<usize> {
    let mut p = vec![BOS];
    p.extend(tok.encode(question));
    p
}

fn answer_ids(tok: &Tokenizer, answer: &str) -> Vec<usize> {
    let mut a = tok.encode(answer);
    a.push(EOS);
    a
}

fn mean_logprob(source: &dyn LogitSource, prompt: &[usize], answer: &[usize]) -> Result<f64> {
    let lp = answer_token_logprobs(source, prompt, answer)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Generate an answer for `qa` and score its original, paraphrased and
/// perturbed answers. Paraphrased answers are conditioned on the original
/// question; perturbed answers share the original template.
pub fn score_qa(
    source: &dyn LogitSource,
    tok: &Tokenizer,
    qa: &QaPair,
    split: &str,
    max_len: usize,
) -> Result<ScoreRecord> {
    let prompt = prompt_ids(tok, &qa.question);
    let truth = answer_ids(tok, &qa.answer);
    let generated = greedy_decode(source, &prompt, max_len, false)?;
    let paraphrased = qa
        .paraphrased_answers
        .iter()
        .map(|a| mean_logprob(source, &prompt, &answer_ids(tok, a)))
        .collect::<Result<_>>()?;
    let perturbed = qa
        .perturbed_answers
        .iter()
        .map(|a| mean_logprob(source, &prompt, &answer_ids(tok, a)))
        .collect::<Result<_>>()?;
    Ok(ScoreRecord {
        id: qa.id.clone(),
        split: split.to_string(),
        prompt: qa.question.clone(),
        reference: qa.answer.clone(),
        generation: tok.decode(&generated.tokens),
        answer_logprobs: AnswerLogprobs {
            truth: mean_logprob(source, &prompt, &truth)?,
            paraphrased,
            perturbed,
        },
        answer_tokens: truth.len(),
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
