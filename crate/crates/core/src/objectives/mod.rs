//! Unlearning objectives: forget losses (GA, DPO, NPO), retain losses (GD,
//! KL), their weighted combination, the assistant objective and the offset
//! composition. Every loss is built on a [`Tape`] so it can be differentiated.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{AdapterVars, ModelConfig, ModelParams, ModelVars};
use crate::tensor::{log_softmax, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Forget,
    Retain,
    Idk,
}

/// Tokenized examples of one kind. The loss mask is each example's answer
/// span (see [`Example::answer_rows`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub source: Source,
}

impl Batch {
    pub fn new(examples: Vec<Example>, source: Source) -> Self {
        Self { examples, source }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn answer_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.answer.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForgetLoss {
    Ga,
    Dpo,
    Npo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetainLoss {
    Gd,
    Kl,
}

/// Unlearning method tag, written like `GA+KL`, `OFFSET-NPO+KL` or `ULD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Conventional {
        forget: ForgetLoss,
        retain: Option<RetainLoss>,
    },
    Offset {
        forget: ForgetLoss,
        retain: Option<RetainLoss>,
    },
    Uld,
}

impl Method {
    pub const fn conventional(forget: ForgetLoss, retain: Option<RetainLoss>) -> Self {
        Method::Conventional { forget, retain }
    }

    /// Every conventional baseline, then the offset variants with KL.
    pub fn baselines() -> Vec<Method> {
        let mut out = Vec::new();
        for f in [ForgetLoss::Ga, ForgetLoss::Dpo, ForgetLoss::Npo] {
            for r in [None, Some(RetainLoss::Gd), Some(RetainLoss::Kl)] {
                out.push(Method::Conventional { forget: f, retain: r });
            }
        }
        for f in [ForgetLoss::Ga, ForgetLoss::Dpo, ForgetLoss::Npo] {
            out.push(Method::Offset {
                forget: f,
                retain: Some(RetainLoss::Kl),
            });
        }
        out
    }

    pub fn forget_loss(self) -> Option<ForgetLoss> {
        match self {
            Method::Conventional { forget, .. } | Method::Offset { forget, .. } => Some(forget),
            Method::Uld => None,
        }
    }

    pub fn retain_loss(self) -> Option<RetainLoss> {
        match self {
            Method::Conventional { retain, .. } | Method::Offset { retain, .. } => retain,
            Method::Uld => None,
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(self.forget_loss(), Some(ForgetLoss::Dpo | ForgetLoss::Npo))
            || self.retain_loss() == Some(RetainLoss::Kl)
    }

    pub fn needs_retain(self) -> bool {
        self == Method::Uld || self.retain_loss().is_some()
    }

    /// Filesystem-friendly name, e.g. `offset-npo_kl`.
    pub fn slug(self) -> String {
        self.to_string().to_lowercase().replace('+', "_")
    }

    pub fn default_retain_weight(self) -> f64 {
        match self {
            Method::Uld => 6.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = |forget: &ForgetLoss, retain: &Option<RetainLoss>| {
            let a = match forget {
                ForgetLoss::Ga => "GA",
                ForgetLoss::Dpo => "DPO",
                ForgetLoss::Npo => "NPO",
            };
            match retain {
                None => a.to_string(),
                Some(RetainLoss::Gd) => format!("{a}+GD"),
                Some(RetainLoss::Kl) => format!("{a}+KL"),
            }
        };
        match self {
            Method::Conventional { forget, retain } => write!(f, "{}", body(forget, retain)),
            Method::Offset { forget, retain } => write!(f, "OFFSET-{}", body(forget, retain)),
            Method::Uld => write!(f, "ULD"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_uppercase().replace('_', "+");
        if up == "ULD" {
            return Ok(Method::Uld);
        }
        let (offset, rest) = match up.strip_prefix("OFFSET-") {
            Some(r) => (true, r),
            None => (false, up.as_str()),
        };
        let (f, r) = match rest.split_once('+') {
            Some((f, r)) => (f, Some(r)),
            None => (rest, None),
        };
        let forget = match f {
            "GA" => ForgetLoss::Ga,
            "DPO" => ForgetLoss::Dpo,
            "NPO" => ForgetLoss::Npo,
            _ => return Err(Error::Config(format!("unknown method tag {s:?}"))),
        };
        let retain = match r {
            None => None,
            Some("GD") => Some(RetainLoss::Gd),
            Some("KL") => Some(RetainLoss::Kl),
            Some(_) => return Err(Error::Config(format!("unknown method tag {s:?}"))),
        };
        Ok(if offset {
            Method::Offset { forget, retain }
        } else {
            Method::Conventional { forget, retain }
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    /// β of the forget/retain combination.
    pub retain_weight: f64,
    /// β inside the DPO/NPO sigmoid.
    pub preference_beta: f64,
    /// Divide DPO/NPO sequence log-probabilities by answer length.
    #[serde(default)]
    pub length_normalize: bool,
    /// α of the offset composition.
    #[serde(default = "one")]
    pub offset_alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            retain_weight: method.default_retain_weight(),
            preference_beta: 0.1,
            length_normalize: false,
            offset_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retain_weight >= 0.0 && self.retain_weight.is_finite()) {
            return Err(Error::Config(format!("retain_weight {} must be ≥ 0", self.retain_weight)));
        }
        if !(self.preference_beta > 0.0 && self.preference_beta.is_finite()) {
            return Err(Error::Config(format!(
                "preference_beta {} must be > 0",
                self.preference_beta
            )));
        }
        if !(self.offset_alpha >= 0.0 && self.offset_alpha.is_finite()) {
            return Err(Error::Config("offset_alpha must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Answer-row log-probabilities `[|answer|×V]` of a model without a tape.
pub fn answer_log_probs<T: Scalar>(model: &ModelParams<T>, ex: &Example) -> Result<Tensor<T>> {
    let tokens = ex.tokens();
    let logits = model.forward_logits(&tokens[..tokens.len() - 1])?;
    let v = logits.last_dim();
    let mut rows = Vec::with_capacity(ex.answer.len() * v);
    for r in ex.answer_rows() {
        rows.extend_from_slice(logits.row(r));
    }
    log_softmax(&Tensor::new(vec![ex.answer.len(), v], rows)?)
}

enum FrozenKind<'m, T: Scalar> {
    LogProbs(&'m ModelParams<T>),
    OffsetBase {
        target: &'m ModelParams<T>,
        phi0: &'m ModelParams<T>,
        alpha: f64,
    },
}

/// Answer rows of frozen models, memoized per example.
pub struct FrozenRows<'m, T: Scalar> {
    kind: FrozenKind<'m, T>,
    cache: RefCell<HashMap<Vec<usize>, Tensor<T>>>,
}

impl<'m, T: Scalar> FrozenRows<'m, T> {
    /// Log-probabilities of a reference model θ⁽⁰⁾.
    pub fn reference(model: &'m ModelParams<T>) -> Self {
        Self {
            kind: FrozenKind::LogProbs(model),
            cache: RefCell::default(),
        }
    }

    /// The constant part `log p_target − α·log p_φ⁽⁰⁾` of the offset composition.
    pub fn offset_base(target: &'m ModelParams<T>, phi0: &'m ModelParams<T>, alpha: f64) -> Result<Self> {
        if target.config.vocab_size != phi0.config.vocab_size {
            return Err(Error::Contract(format!(
                "offset models disagree on vocabulary: {} vs {}",
                target.config.vocab_size, phi0.config.vocab_size
            )));
        }
        Ok(Self {
            kind: FrozenKind::OffsetBase { target, phi0, alpha },
            cache: RefCell::default(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        match &self.kind {
            FrozenKind::LogProbs(m) => m.config.vocab_size,
            FrozenKind::OffsetBase { target, .. } => target.config.vocab_size,
        }
    }

    pub fn rows(&self, ex: &Example) -> Result<Tensor<T>> {
        let key = ex.tokens();
        if let Some(t) = self.cache.borrow().get(&key) {
            return Ok(t.clone());
        }
        let rows = match &self.kind {
            FrozenKind::LogProbs(m) => answer_log_probs(*m, ex)?,
            FrozenKind::OffsetBase { target, phi0, alpha } => {
                let t = answer_log_probs(*target, ex)?;
                let p = answer_log_probs(*phi0, ex)?;
                let a = T::of(*alpha);
                let data = t.data().iter().zip(p.data()).map(|(&x, &y)| x - a * y).collect();
                Tensor::new(t.shape().to_vec(), data)?
            }
        };
        self.cache.borrow_mut().insert(key, rows.clone());
        Ok(rows)
    }

    /// Summed (or length-averaged) answer log-probability; reference models only.
    pub fn sequence_logprob(&self, ex: &Example, normalize: bool) -> Result<f64> {
        let rows = self.rows(ex)?;
        let total: f64 = ex
            .answer
            .iter()
            .enumerate()
            .map(|(i, &tok)| rows.row(i)[tok].as_f64())
            .sum();
        Ok(if normalize { total / ex.answer.len() as f64 } else { total })
    }
}

/// The trainable distribution a loss is evaluated on.
pub enum Policy<'a, 't, T: Scalar> {
    /// A full model whose parameters are registered on the tape.
    Model {
        vars: &'a ModelVars<'t, T>,
        config: &'a ModelConfig,
    },
    /// Frozen prefix of depth `k` plus LoRA adapters.
    Assistant {
        vars: &'a ModelVars<'t, T>,
        adapters: &'a [AdapterVars<'t, T>],
        config: &'a ModelConfig,
        k: usize,
    },
    /// `log_softmax(base + α·log p_φ)` with a trainable standalone φ.
    Offset {
        vars: &'a ModelVars<'t, T>,
        config: &'a ModelConfig,
        alpha: T,
        base: &'a FrozenRows<'a, T>,
    },
}

impl<'a, 't, T: Scalar> Policy<'a, 't, T> {
    pub fn offset(
        vars: &'a ModelVars<'t, T>,
        config: &'a ModelConfig,
        alpha: f64,
        base: &'a FrozenRows<'a, T>,
    ) -> Result<Self> {
        if config.vocab_size != base.vocab_size() {
            return Err(Error::Contract(format!(
                "offset assistant vocabulary {} differs from target {}",
                config.vocab_size,
                base.vocab_size()
            )));
        }
        Ok(Policy::Offset {
            vars,
            config,
            alpha: T::of(alpha),
            base,
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Policy::Model { config, .. } | Policy::Assistant { config, .. } | Policy::Offset { config, .. } => {
                config.vocab_size
            }
        }
    }

    fn tape(&self) -> &'t Tape<T> {
        match self {
            Policy::Model { vars, .. } | Policy::Assistant { vars, .. } | Policy::Offset { vars, .. } => {
                vars.lm_head.tape()
            }
        }
    }

    /// Answer-row log-probabilities `[|answer|×V]`. The head is applied to
    /// answer rows only.
    pub fn answer_log_probs(&self, ex: &Example) -> Result<Var<'t, T>> {
        let tokens = ex.tokens();
        let input = &tokens[..tokens.len() - 1];
        let rows: Vec<usize> = ex.answer_rows().collect();
        let (vars, config, depth, adapters) = match self {
            Policy::Model { vars, config } => (*vars, *config, config.n_layers, None),
            Policy::Assistant {
                vars,
                adapters,
                config,
                k,
            } => (*vars, *config, *k, Some(*adapters)),
            Policy::Offset { vars, config, .. } => (*vars, *config, config.n_layers, None),
        };
        let hidden = vars.hidden(config, input, depth, adapters)?;
        let logp = hidden.select_rows(&rows)?.matmul(vars.lm_head)?.log_softmax();
        match self {
            Policy::Offset { alpha, base, .. } => {
                let c = self.tape().constant(&base.rows(ex)?);
                Ok(c.add(logp.scale(*alpha))?.log_softmax())
            }
            _ => Ok(logp),
        }
    }

    fn sequence_logprob(&self, ex: &Example, normalize: bool) -> Result<Var<'t, T>> {
        let s = self.answer_log_probs(ex)?.gather(&ex.answer)?.sum();
        Ok(if normalize {
            s.scale(T::of(1.0 / ex.answer.len() as f64))
        } else {
            s
        })
    }
}

fn nonempty(batch: &Batch, what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract(format!("empty {what} batch")));
    }
    Ok(())
}

fn accumulate<'t, T: Scalar>(acc: Option<Var<'t, T>>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    match acc {
        None => Ok(x),
        Some(a) => a.add(x),
    }
}

fn constant<'t, T: Scalar>(tape: &'t Tape<T>, v: f64) -> Var<'t, T> {
    tape.constant(&Tensor::scalar(T::of(v)))
}

/// Mean answer-token log-probability `E[log p(y|x)]`, minimized by gradient
/// ascent. Unbounded below.
pub fn loss_ga<'t, T: Scalar>(policy: &Policy<'_, 't, T>, batch: &Batch) -> Result<Var<'t, T>> {
    nonempty(batch, "forget")?;
    let mut acc = None;
    for ex in &batch.examples {
        let s = policy.answer_log_probs(ex)?.gather(&ex.answer)?.sum();
        acc = Some(accumulate(acc, s)?);
    }
    Ok(acc.expect("nonempty").scale(T::of(1.0 / batch.answer_tokens() as f64)))
}

/// Mean answer-token cross-entropy.
pub fn loss_gd<'t, T: Scalar>(policy: &Policy<'_, 't, T>, batch: &Batch) -> Result<Var<'t, T>> {
    Ok(loss_ga(policy, batch)?.neg())
}

/// Token-averaged `KL(p_θ ‖ p_ref)` over answer positions.
pub fn loss_kl<'t, T: Scalar>(
    policy: &Policy<'_, 't, T>,
    reference: &FrozenRows<'_, T>,
    batch: &Batch,
) -> Result<Var<'t, T>> {
    nonempty(batch, "retain")?;
    let tape = policy.tape();
    let mut acc = None;
    for ex in &batch.examples {
        let lp = policy.answer_log_probs(ex)?;
        let r = tape.constant(&reference.rows(ex)?);
        let kl = lp.exp().mul(lp.sub(r)?)?.sum();
        acc = Some(accumulate(acc, kl)?);
    }
    Ok(acc.expect("nonempty").scale(T::of(1.0 / batch.answer_tokens() as f64)))
}

/// `−(1/β)·E[log σ(β·Δ_idk − β·Δ_y)]`, with `idk.examples[i]` the refusal
/// paired with `forget.examples[i]`.
pub fn loss_dpo<'t, T: Scalar>(
    policy: &Policy<'_, 't, T>,
    reference: &FrozenRows<'_, T>,
    forget: &Batch,
    idk: &Batch,
    beta: f64,
    normalize: bool,
) -> Result<Var<'t, T>> {
    nonempty(forget, "forget")?;
    if idk.len() != forget.len() {
        return Err(Error::Contract(format!(
            "{} refusals for {} forget examples",
            idk.len(),
            forget.len()
        )));
    }
    let tape = policy.tape();
    let mut acc = None;
    for (y, alt) in forget.examples.iter().zip(&idk.examples) {
        let ref_gap = reference.sequence_logprob(alt, normalize)? - reference.sequence_logprob(y, normalize)?;
        let gap = policy
            .sequence_logprob(alt, normalize)?
            .sub(policy.sequence_logprob(y, normalize)?)?
            .sub(constant(tape, ref_gap))?;
        acc = Some(accumulate(acc, gap.scale(T::of(beta)).log_sigmoid())?);
    }
    Ok(acc.expect("nonempty").scale(T::of(-1.0 / (beta * forget.len() as f64))))
}

/// `−(2/β)·E[log σ(−β·Δ_y)]`.
pub fn loss_npo<'t, T: Scalar>(
    policy: &Policy<'_, 't, T>,
    reference: &FrozenRows<'_, T>,
    forget: &Batch,
    beta: f64,
    normalize: bool,
) -> Result<Var<'t, T>> {
    nonempty(forget, "forget")?;
    let tape = policy.tape();
    let mut acc = None;
    for y in &forget.examples {
        let delta = policy
            .sequence_logprob(y, normalize)?
            .sub(constant(tape, reference.sequence_logprob(y, normalize)?))?;
        acc = Some(accumulate(acc, delta.scale(T::of(-beta)).log_sigmoid())?);
    }
    Ok(acc.expect("nonempty").scale(T::of(-2.0 / (beta * forget.len() as f64))))
}

/// Cross-entropy against the uniform distribution, `−(1/V)·Σ_y log p(y|x)`,
/// averaged over answer positions. At least `ln V`.
pub fn loss_uniform_ce<'t, T: Scalar>(policy: &Policy<'_, 't, T>, batch: &Batch) -> Result<Var<'t, T>> {
    nonempty(batch, "retain")?;
    let v = policy.vocab_size() as f64;
    let mut acc = None;
    for ex in &batch.examples {
        acc = Some(accumulate(acc, policy.answer_log_probs(ex)?.sum())?);
    }
    Ok(acc
        .expect("nonempty")
        .scale(T::of(-1.0 / (v * batch.answer_tokens() as f64))))
}

/// Assistant objective: remember D_f', forget D_r'.
pub fn loss_uld_assistant<'t, T: Scalar>(
    policy: &Policy<'_, 't, T>,
    forget_prime: &Batch,
    retain_prime: &Batch,
    retain_weight: f64,
) -> Result<Var<'t, T>> {
    let ce = loss_gd(policy, forget_prime)?;
    let uni = loss_uniform_ce(policy, retain_prime)?;
    ce.add(uni.scale(T::of(retain_weight)))
}

/// `L_forget + β·L_retain` for tape values.
pub fn combine<'t, T: Scalar>(
    forget: Var<'t, T>,
    retain: Option<Var<'t, T>>,
    retain_weight: f64,
) -> Result<Var<'t, T>> {
    match retain {
        None => Ok(forget),
        Some(r) => forget.add(r.scale(T::of(retain_weight))),
    }
}

/// `L_forget + β·L_retain` on plain numbers, checked against the method tag.
pub fn combine_conventional(method: &str, forget: f64, retain: Option<f64>, retain_weight: f64) -> Result<f64> {
    let m: Method = method.parse()?;
    match (m.retain_loss(), retain) {
        (None, None) => Ok(forget),
        (Some(_), Some(r)) => Ok(forget + retain_weight * r),
        (None, Some(_)) if retain_weight == 0.0 => Ok(forget),
        _ => Err(Error::Config(format!("retain term does not match method {m}"))),
    }
}

/// Batches for one optimization step.
#[derive(Clone, Copy)]
pub struct StepBatches<'b> {
    pub forget: &'b Batch,
    pub retain: Option<&'b Batch>,
    /// Refusals paired with `forget`, for DPO.
    pub idk: Option<&'b Batch>,
}

/// The full objective selected by `cfg.method`.
pub fn method_loss<'t, T: Scalar>(
    cfg: &LossConfig,
    policy: &Policy<'_, 't, T>,
    reference: Option<&FrozenRows<'_, T>>,
    batches: StepBatches<'_>,
) -> Result<Var<'t, T>> {
    let need_ref = || reference.ok_or_else(|| Error::Contract(format!("{} needs a reference model", cfg.method)));
    let retain = || {
        batches
            .retain
            .ok_or_else(|| Error::Contract(format!("{} needs a retain batch", cfg.method)))
    };
    if cfg.method == Method::Uld {
        return loss_uld_assistant(policy, batches.forget, retain()?, cfg.retain_weight);
    }
    let (beta, norm) = (cfg.preference_beta, cfg.length_normalize);
    let forget = match cfg.method.forget_loss().expect("not ULD") {
        ForgetLoss::Ga => loss_ga(policy, batches.forget)?,
        ForgetLoss::Npo => loss_npo(policy, need_ref()?, batches.forget, beta, norm)?,
        ForgetLoss::Dpo => {
            let idk = batches
                .idk
                .ok_or_else(|| Error::Contract("DPO needs refusal answers".into()))?;
            loss_dpo(policy, need_ref()?, batches.forget, idk, beta, norm)?
        }
    };
    let retain_term = match cfg.method.retain_loss() {
        None => None,
        Some(RetainLoss::Gd) => Some(loss_gd(policy, retain()?)?),
        Some(RetainLoss::Kl) => Some(loss_kl(policy, need_ref()?, retain()?)?),
    };
    combine(forget, retain_term, cfg.retain_weight)
}

/// `KL(p ‖ q)` from two log-probability rows.
pub fn kl_value(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

/// Per-pair DPO loss for given log-ratio gaps.
pub fn dpo_value(delta_idk: f64, delta_y: f64, beta: f64) -> f64 {
    -crate::tensor::kernels::log_sigmoid(beta * (delta_idk - delta_y)) / beta
}

/// Per-example NPO loss.
pub fn npo_value(delta_y: f64, beta: f64) -> f64 {
    -2.0 * crate::tensor::kernels::log_sigmoid(-beta * delta_y) / beta
}
