//! Training loops: fine-tuning, every unlearning method, per-epoch
//! evaluation snapshots and run records.

pub mod optim;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamConfig, AdamState};

use crate::data::{Corpus, Example, Tokenizer};
use crate::decode::{write_jsonl, Combined, CombinerConfig};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, EvalReport, Scores};
use crate::model::checkpoint::{save_assistant, save_model};
use crate::model::{build_assistant, AdapterVars, AssistantModel, LogitSource, ModelConfig, ModelParams, ModelVars};
use crate::objectives::{loss_gd, method_loss, Batch, FrozenRows, LossConfig, Method, Policy, Source, StepBatches};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(method: Method, lr: f64, epochs: usize) -> Self {
        Self {
            lr,
            batch_size: 16,
            epochs,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
            clip_norm: 1.0,
            loss: LossConfig::new(method),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("weight_decay and clip_norm must be ≥ 0".into()));
        }
        self.loss.validate()
    }
}

/// A differentiable loss over an ordered list of trainable leaves.
pub trait Objective<T: Scalar> {
    fn loss<'t>(&self, tape: &'t Tape<T>, leaves: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// AdamW with global-norm clipping over a fixed parameter list.
pub struct Optimizer {
    pub adam: AdamConfig,
    pub clip_norm: f64,
    state: AdamState,
}

impl Optimizer {
    pub fn new<T: Scalar>(params: &[&mut Tensor<T>], cfg: &TrainConfig) -> Self {
        Self {
            adam: cfg.adam(),
            clip_norm: cfg.clip_norm,
            state: AdamState::new(params),
        }
    }

    /// Evaluate, differentiate and update. `(epoch, batch)` label a
    /// non-finite loss or update.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<T>],
        objective: &dyn Objective<T>,
        epoch: usize,
        batch: usize,
    ) -> Result<f64> {
        let (loss, mut grads) = {
            let tape = Tape::new();
            let leaves: Vec<Var<'_, T>> = params.iter().map(|p| tape.variable(p)).collect();
            let l = objective.loss(&tape, &leaves)?;
            let value = l.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch });
            }
            tape.backward(l)?;
            let grads: Vec<Option<Tensor<T>>> = leaves.iter().map(|v| tape.grad(*v)).collect();
            (value, grads)
        };
        if self.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.clip_norm);
        }
        adamw_step(params, &grads, &mut self.state, &self.adam)?;
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite { epoch, batch });
        }
        Ok(loss)
    }
}

/// Answer-masked cross-entropy of a full model.
pub struct FinetuneObjective<'a> {
    pub config: &'a ModelConfig,
    pub batch: &'a Batch,
}

impl<T: Scalar> Objective<T> for FinetuneObjective<'_> {
    fn loss<'t>(&self, _tape: &'t Tape<T>, leaves: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let vars = ModelVars::from_leaves(self.config, leaves)?;
        loss_gd(
            &Policy::Model {
                vars: &vars,
                config: self.config,
            },
            self.batch,
        )
    }
}

/// What the leaves of an unlearning step parameterize.
pub enum Trainee<'a, T: Scalar> {
    /// A full copy of the target.
    Model(&'a ModelConfig),
    /// Adapters on the frozen `k`-layer prefix of `target`.
    Assistant {
        target: &'a ModelParams<T>,
        k: usize,
        scale: f64,
    },
    /// A standalone model φ composed with `base`.
    Offset {
        config: &'a ModelConfig,
        alpha: f64,
        base: &'a FrozenRows<'a, T>,
    },
}

pub struct MethodObjective<'a, T: Scalar> {
    pub trainee: Trainee<'a, T>,
    pub loss: &'a LossConfig,
    pub reference: Option<&'a FrozenRows<'a, T>>,
    pub batches: StepBatches<'a>,
}

impl<T: Scalar> Objective<T> for MethodObjective<'_, T> {
    fn loss<'t>(&self, tape: &'t Tape<T>, leaves: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        match &self.trainee {
            Trainee::Model(config) => {
                let vars = ModelVars::from_leaves(config, leaves)?;
                let policy = Policy::Model { vars: &vars, config };
                method_loss(self.loss, &policy, self.reference, self.batches)
            }
            Trainee::Assistant { target, k, scale } => {
                let vars = target.register(tape, false);
                let adapters = AdapterVars::from_leaves(T::of(*scale), leaves)?;
                let policy = Policy::Assistant {
                    vars: &vars,
                    adapters: &adapters,
                    config: &target.config,
                    k: *k,
                };
                method_loss(self.loss, &policy, self.reference, self.batches)
            }
            Trainee::Offset { config, alpha, base } => {
                let vars = ModelVars::from_leaves(config, leaves)?;
                let policy = Policy::offset(&vars, config, *alpha, base)?;
                method_loss(self.loss, &policy, self.reference, self.batches)
            }
        }
    }
}

fn batches_of(data: &[Example], order: &[usize], size: usize, source: Source) -> Vec<Batch> {
    order
        .chunks(size)
        .map(|c| Batch::new(c.iter().map(|&i| data[i].clone()).collect(), source))
        .collect()
}

/// Minimize answer-masked cross-entropy on `data`. Returns the trained
/// (frozen) parameters and the mean loss of each epoch.
pub fn finetune<T: Scalar>(
    params: ModelParams<T>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("fine-tuning set is empty".into()));
    }
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    let mut params = params;
    params.set_trainable(true);
    let config = params.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(&params.tensors_mut(), cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = batches_of(data, &order, cfg.batch_size, Source::Retain);
        for (b, batch) in batches.iter().enumerate() {
            let obj = FinetuneObjective {
                config: &config,
                batch,
            };
            total += opt.step(&mut params.tensors_mut(), &obj, epoch, b)?;
        }
        losses.push(total / batches.len() as f64);
    }
    params.set_trainable(false);
    Ok((params, losses))
}

/// Assistant shape. `k = None` means `max(1, M/4)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssistantConfig {
    pub k: Option<usize>,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        Self {
            k: None,
            rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl AssistantConfig {
    pub fn depth(&self, n_layers: usize) -> usize {
        self.k.unwrap_or((n_layers / 4).max(1))
    }
}

/// Tokenized unlearning data. `idk[i]` is the refusal paired with `forget[i]`.
#[derive(Clone, Debug, Default)]
pub struct UnlearnData {
    pub forget: Vec<Example>,
    pub retain: Vec<Example>,
    pub idk: Vec<Example>,
}

/// The trained object of an unlearning run.
pub enum Learner<T: Scalar = f32> {
    Model(ModelParams<T>),
    Assistant(AssistantModel<T>),
    Offset { phi: ModelParams<T>, phi0: ModelParams<T> },
}

impl<T: Scalar> Learner<T> {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Learner::Model(p) => p.tensors_mut(),
            Learner::Assistant(a) => a.tensors_mut(),
            Learner::Offset { phi, .. } => phi.tensors_mut(),
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            Learner::Model(p) => p.count_total(),
            Learner::Assistant(a) => a.count_trainable(),
            Learner::Offset { phi, .. } => phi.count_total(),
        }
    }

    /// The unlearned model as a decoding source.
    pub fn combined<'a>(
        &'a self,
        target: &'a ModelParams<T>,
        combiner: &CombinerConfig,
        offset_alpha: f64,
    ) -> Result<Combined<'a>> {
        match self {
            Learner::Model(p) => Ok(Combined::identity(p)),
            Learner::Assistant(a) => Combined::uld(target, a, combiner.alpha, combiner.filter_rate),
            Learner::Offset { phi, phi0 } => Combined::offset(target, phi, phi0, offset_alpha),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Learner::Model(p) | Learner::Offset { phi: p, .. } => save_model(p, path),
            Learner::Assistant(a) => save_assistant(a, path),
        }
    }

    pub fn checkpoint_name(&self, epoch: usize) -> String {
        match self {
            Learner::Assistant(_) => format!("epoch_{epoch}.ulda"),
            _ => format!("epoch_{epoch}.uldc"),
        }
    }
}

/// File under `ckpt/` holding an offset run's untouched φ⁽⁰⁾.
pub const OFFSET_REFERENCE: &str = "reference.uldc";

/// Name of the first tensor that differs from the snapshot.
pub fn frozen_check<T: Scalar>(snapshot: &ModelParams<T>, current: &ModelParams<T>) -> Result<()> {
    for ((name, a), (_, b)) in snapshot.named_tensors().iter().zip(current.named_tensors()) {
        if !a.bitwise_eq(b) {
            return Err(Error::FrozenMutation(name.clone()));
        }
    }
    Ok(())
}

/// Scores a decoding source against the corpus.
pub struct Evaluator<'a> {
    pub corpus: &'a Corpus,
    pub tokenizer: &'a Tokenizer,
    /// The retain model's truth ratios on D_f.
    pub reference_ratios: Option<Vec<f64>>,
    pub max_len: usize,
}

impl Evaluator<'_> {
    pub fn evaluate(&self, source: &dyn LogitSource) -> Result<(EvalReport, Scores)> {
        let scores = score_corpus(source, self.tokenizer, self.corpus, self.max_len)?;
        let report = scores.report(self.reference_ratios.as_deref())?;
        Ok((report, scores))
    }
}

/// JSON has no NaN; serde_json writes it as `null`.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub forget_ce: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub holdout_retain_ce: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub forget_quality: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub model_utility: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub forget_rouge: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub retain_rouge: f64,
    /// Training wall-clock for the epoch, evaluation excluded.
    #[serde(deserialize_with = "nan_from_null")]
    pub seconds: f64,
    /// Mean training objective over the epoch's steps.
    #[serde(deserialize_with = "nan_from_null")]
    pub train_loss: f64,
    /// Smallest single-step training objective.
    #[serde(deserialize_with = "nan_from_null")]
    pub min_step_loss: f64,
    pub checkpoint: String,
}

/// The columns of epochs.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub forget_ce: f64,
    pub holdout_retain_ce: f64,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub forget_rouge: f64,
    pub retain_rouge: f64,
    pub seconds: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            forget_ce: r.forget_ce,
            holdout_retain_ce: r.holdout_retain_ce,
            forget_quality: r.forget_quality,
            model_utility: r.model_utility,
            forget_rouge: r.forget_rouge,
            retain_rouge: r.retain_rouge,
            seconds: r.seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config: TrainConfig,
    pub assistant: Option<AssistantConfig>,
    pub combiner: Option<CombinerConfig>,
    pub trainable_params: usize,
    pub target_params: usize,
    /// Epoch 0 is the target before unlearning.
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.target_params as f64
    }

    /// The unlearning epoch with the highest forget quality, ties broken by
    /// model utility. Epoch 0 is never selected.
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        best_epoch(&self.epochs)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn epoch(&self, n: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == n)
    }

    /// Mean training seconds over unlearning epochs.
    pub fn seconds_per_epoch(&self) -> f64 {
        let e: Vec<f64> = self.epochs.iter().filter(|e| e.epoch > 0).map(|e| e.seconds).collect();
        e.iter().sum::<f64>() / e.len().max(1) as f64
    }

    pub fn rows(&self) -> Vec<EpochRow> {
        self.epochs.iter().map(EpochRow::from).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_epochs_csv(dir.join("epochs.csv"), &self.rows())?;
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn best_epoch(epochs: &[EpochRecord]) -> Option<&EpochRecord> {
    epochs.iter().filter(|e| e.epoch > 0).fold(None, |best: Option<&EpochRecord>, e| match best {
        Some(b)
            if b.forget_quality > e.forget_quality
                || (b.forget_quality == e.forget_quality && b.model_utility >= e.model_utility) =>
        {
            Some(b)
        }
        _ => Some(e),
    })
}

pub fn write_epochs_csv(path: impl AsRef<Path>, rows: &[EpochRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epochs_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Append one epoch's evaluation to `run`.
pub fn epoch_snapshot(
    run: &mut RunRecord,
    epoch: usize,
    report: &EvalReport,
    checkpoint: String,
    seconds: f64,
    train: (f64, f64),
) -> Result<()> {
    if run.epochs.last().is_some_and(|e| e.epoch >= epoch) {
        return Err(Error::Contract(format!("epoch {epoch} is not after the last recorded epoch")));
    }
    run.epochs.push(EpochRecord {
        epoch,
        forget_ce: report.forget_ce,
        holdout_retain_ce: report.holdout_ce(),
        forget_quality: report.forget_quality,
        model_utility: report.model_utility,
        forget_rouge: report.forget_rouge,
        retain_rouge: report.retain_rouge(),
        seconds,
        train_loss: train.0,
        min_step_loss: train.1,
        checkpoint,
    });
    Ok(())
}

/// Everything an unlearning run needs besides the data.
pub struct UnlearnSetup<'a> {
    pub target: &'a Arc<ModelParams<f32>>,
    pub cfg: &'a TrainConfig,
    pub assistant: &'a AssistantConfig,
    pub combiner: &'a CombinerConfig,
    /// Per-epoch evaluation; without it epochs record NaN metrics.
    pub evaluator: Option<&'a Evaluator<'a>>,
    /// The target's own evaluation, recorded as epoch 0.
    pub target_report: Option<&'a EvalReport>,
    /// Run directory for checkpoints, scores, epochs.csv and run.json.
    pub out_dir: Option<&'a Path>,
}

fn nan_report() -> EvalReport {
    EvalReport {
        forget_quality: f64::NAN,
        model_utility: f64::NAN,
        groups: Vec::new(),
        forget_rouge: f64::NAN,
        forget_ce: f64::NAN,
        forget_truth_ratios: Vec::new(),
        clamped_ratios: 0,
        perplexity: f64::NAN,
    }
}

/// Run one unlearning method for `cfg.epochs` epochs. Each step draws one
/// forget batch and, when the method has a retain term, one retain batch.
pub fn unlearn(setup: &UnlearnSetup<'_>, data: &UnlearnData) -> Result<(RunRecord, Learner<f32>)> {
    let cfg = setup.cfg;
    cfg.validate()?;
    setup.combiner.validate()?;
    let method = cfg.loss.method;
    if data.forget.is_empty() {
        return Err(Error::Contract("forget set is empty".into()));
    }
    if method.needs_retain() && data.retain.is_empty() {
        return Err(Error::Contract(format!("{method} needs retain data")));
    }
    if method.forget_loss() == Some(crate::objectives::ForgetLoss::Dpo) && data.idk.len() != data.forget.len() {
        return Err(Error::Contract("DPO needs one refusal per forget example".into()));
    }
    let target: &ModelParams<f32> = setup.target;
    let snapshot = target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = setup.assistant.depth(target.config.n_layers);
    let mut learner = match method {
        Method::Conventional { .. } => {
            let mut p = target.clone();
            p.set_trainable(true);
            Learner::Model(p)
        }
        Method::Uld => Learner::Assistant(build_assistant(
            Arc::clone(setup.target),
            k,
            setup.assistant.rank,
            setup.assistant.lora_alpha,
            &mut rng,
        )?),
        Method::Offset { .. } => {
            let mut config = target.config.clone();
            config.n_layers = k;
            let phi0 = ModelParams::<f32>::init(config, &mut rng)?.frozen();
            let mut phi = phi0.clone();
            phi.set_trainable(true);
            Learner::Offset { phi, phi0 }
        }
    };
    let trainable_params = learner.trainable_params();
    let reference = FrozenRows::reference(target);
    let phi0_copy = match &learner {
        Learner::Offset { phi0, .. } => Some(phi0.clone()),
        _ => None,
    };
    let base = match &phi0_copy {
        Some(p0) => Some(FrozenRows::offset_base(target, p0, cfg.loss.offset_alpha)?),
        None => None,
    };
    let uld_scale = setup.assistant.lora_alpha / setup.assistant.rank as f64;

    let mut run = RunRecord {
        method,
        config: cfg.clone(),
        assistant: (method == Method::Uld || matches!(method, Method::Offset { .. })).then(|| setup.assistant.clone()),
        combiner: (method == Method::Uld).then(|| setup.combiner.clone()),
        trainable_params,
        target_params: target.count_total(),
        epochs: Vec::new(),
    };
    let ckpt_dir = setup.out_dir.map(|d| d.join("ckpt"));
    if let (Some(dir), Some(p0)) = (&ckpt_dir, &phi0_copy) {
        save_model(p0, dir.join(OFFSET_REFERENCE))?;
    }
    if let Some(report) = setup.target_report {
        epoch_snapshot(&mut run, 0, report, String::new(), 0.0, (f64::NAN, f64::NAN))?;
    }

    let mut opt = Optimizer::new(&learner.tensors_mut(), cfg);
    let mut forget_order: Vec<usize> = (0..data.forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..data.retain.len()).collect();
    retain_order.shuffle(&mut rng);
    let mut retain_pos = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        forget_order.shuffle(&mut rng);
        let (mut total, mut min_loss, mut steps) = (0.0, f64::INFINITY, 0usize);
        for (b, chunk) in forget_order.chunks(cfg.batch_size).enumerate() {
            let forget = Batch::new(chunk.iter().map(|&i| data.forget[i].clone()).collect(), Source::Forget);
            let idk = (!data.idk.is_empty())
                .then(|| Batch::new(chunk.iter().map(|&i| data.idk[i].clone()).collect(), Source::Idk));
            let retain = if method.needs_retain() {
                let mut idx = Vec::with_capacity(cfg.batch_size);
                while idx.len() < cfg.batch_size.min(data.retain.len()) {
                    if retain_pos == retain_order.len() {
                        retain_order.shuffle(&mut rng);
                        retain_pos = 0;
                    }
                    idx.push(retain_order[retain_pos]);
                    retain_pos += 1;
                }
                Some(Batch::new(idx.iter().map(|&i| data.retain[i].clone()).collect(), Source::Retain))
            } else {
                None
            };
            let batches = StepBatches {
                forget: &forget,
                retain: retain.as_ref(),
                idk: idk.as_ref(),
            };
            let trainee = match method {
                Method::Conventional { .. } => Trainee::Model(&target.config),
                Method::Uld => Trainee::Assistant {
                    target,
                    k,
                    scale: uld_scale,
                },
                Method::Offset { .. } => Trainee::Offset {
                    config: &phi0_copy.as_ref().expect("offset").config,
                    alpha: cfg.loss.offset_alpha,
                    base: base.as_ref().expect("offset"),
                },
            };
            let obj = MethodObjective {
                trainee,
                loss: &cfg.loss,
                reference: Some(&reference),
                batches,
            };
            let loss = opt.step(&mut learner.tensors_mut(), &obj, epoch, b)?;
            total += loss;
            min_loss = min_loss.min(loss);
            steps += 1;
        }
        let seconds = start.elapsed().as_secs_f64();
        if !matches!(method, Method::Conventional { .. }) {
            frozen_check(&snapshot, target)?;
        }
        let (report, scores) = match setup.evaluator {
            Some(ev) => {
                let src = learner.combined(target, setup.combiner, cfg.loss.offset_alpha)?;
                let (r, s) = ev.evaluate(&src)?;
                (r, Some(s))
            }
            None => (nan_report(), None),
        };
        let mut ckpt = String::new();
        if let Some(dir) = &ckpt_dir {
            let name = learner.checkpoint_name(epoch);
            learner.save(dir.join(&name))?;
            ckpt = PathBuf::from("ckpt").join(name).to_string_lossy().into_owned();
            if let (Some(s), Some(out)) = (scores, setup.out_dir) {
                let sdir = out.join("scores");
                std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
                write_jsonl(sdir.join(format!("epoch_{epoch}.jsonl")), &s.all())?;
            }
        }
        epoch_snapshot(&mut run, epoch, &report, ckpt, seconds, (total / steps as f64, min_loss))?;
    }
    if let Some(dir) = setup.out_dir {
        run.save(dir)?;
    }
    Ok((run, learner))
}
