use super::{AssistantModel, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Scalar, Tensor};

/// Anything that yields next-token logits for every position of a sequence.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;

    /// Decoding logits `[T×V]`; entries may be `-inf` for filtered tokens.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>>;

    /// Log-probabilities `[T×V]` used for scoring. Always finite.
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        log_softmax(&self.logits(tokens)?)
    }
}

impl<S: LogitSource + ?Sized> LogitSource for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        (**self).logits(tokens)
    }
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        (**self).log_probs(tokens)
    }
}

impl<T: Scalar> LogitSource for ModelParams<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.forward_logits(tokens)?.cast())
    }
}

impl<T: Scalar> LogitSource for AssistantModel<T> {
    fn vocab_size(&self) -> usize {
        self.target.config.vocab_size
    }
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.forward(tokens)?.cast())
    }
}

/// Per-token `log p(answer_i | prompt, answer_<i)`.
pub fn answer_token_logprobs<S: LogitSource + ?Sized>(
    source: &S,
    prompt: &[usize],
    answer: &[usize],
) -> Result<Vec<f64>> {
    if answer.is_empty() {
        return Err(Error::Contract("answer must be nonempty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must hold at least one token".into()));
    }
    let mut seq = Vec::with_capacity(prompt.len() + answer.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&answer[..answer.len() - 1]);
    let lp = source.log_probs(&seq)?;
    let start = prompt.len() - 1;
    Ok(answer
        .iter()
        .enumerate()
        .map(|(i, &tok)| lp.row(start + i)[tok])
        .collect())
}

/// `log p(answer | prompt)` summed over answer tokens.
pub fn sequence_logprob<S: LogitSource + ?Sized>(
    source: &S,
    prompt: &[usize],
    answer: &[usize],
) -> Result<f64> {
    Ok(answer_token_logprobs(source, prompt, answer)?.iter().sum())
}
