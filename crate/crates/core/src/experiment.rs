//! End-to-end pipeline: corpus, target and retain models, unlearning runs,
//! summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_retain, encode_examples, encode_qa, generate_corpus, Corpus, CorpusConfig, Example, QaExample, RetainAugment, Tokenizer};
use crate::decode::{CombinerConfig, write_jsonl};
use crate::engine::{finetune, unlearn, AssistantConfig, Evaluator, Learner, RunRecord, TrainConfig, UnlearnData, UnlearnSetup, OFFSET_REFERENCE};
use crate::error::{Error, Result};
use crate::eval::{record_truth_ratio, EvalReport, ReportRow, Scores};
use crate::model::checkpoint::{load_assistant, load_model, save_model};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{ForgetLoss, Method, RetainLoss};

/// Target and retain-model fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            epochs: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of conventional and offset baselines.
    pub baseline_lr: f64,
    pub uld_lr: f64,
    /// Per-method overrides keyed by tag, e.g. `"DPO+KL": 5e-4`.
    pub method_lr: BTreeMap<String, f64>,
    pub uld_retain_weight: f64,
    pub offset_alpha: f64,
    pub preference_beta: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            baseline_lr: 1e-3,
            uld_lr: 1e-2,
            method_lr: BTreeMap::from([("DPO+KL".to_string(), 2e-2)]),
            uld_retain_weight: 6.5,
            offset_alpha: 1.0,
            preference_beta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; corpus, initialization and shuffling derive from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// `vocab_size` and `max_seq_len` are fitted to the corpus.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    pub assistant: AssistantConfig,
    pub combiner: CombinerConfig,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            assistant: AssistantConfig::default(),
            combiner: CombinerConfig::default(),
            methods: default_methods(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub fn default_methods() -> Vec<Method> {
    let kl = Some(RetainLoss::Kl);
    vec![
        Method::conventional(ForgetLoss::Ga, kl),
        Method::conventional(ForgetLoss::Npo, kl),
        Method::conventional(ForgetLoss::Dpo, kl),
        Method::Offset {
            forget: ForgetLoss::Npo,
            retain: kl,
        },
        Method::Uld,
    ]
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.combiner.validate()?;
        if self.pretrain.batch_size == 0 || self.unlearn.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.assistant.rank == 0 {
            return Err(Error::Config("assistant rank must be positive".into()));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate()
    }

    /// Corpus settings with the master seed applied.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    fn sub_seed(&self, salt: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
    }

    pub fn pretrain_config(&self, salt: u64) -> TrainConfig {
        let mut t = TrainConfig::new(Method::Uld, self.pretrain.lr, self.pretrain.epochs);
        t.batch_size = self.pretrain.batch_size;
        t.seed = self.sub_seed(salt);
        t
    }

    pub fn unlearn_config(&self, method: Method) -> TrainConfig {
        let u = &self.unlearn;
        let lr = u.method_lr.get(&method.to_string()).copied().unwrap_or(match method {
            Method::Uld => u.uld_lr,
            _ => u.baseline_lr,
        });
        let mut t = TrainConfig::new(method, lr, u.epochs);
        t.batch_size = u.batch_size;
        t.seed = self.sub_seed(100);
        t.loss.preference_beta = u.preference_beta;
        t.loss.offset_alpha = u.offset_alpha;
        if method == Method::Uld {
            t.loss.retain_weight = u.uld_retain_weight;
        }
        t
    }

    /// Fit vocabulary and sequence length to the corpus.
    pub fn model_config(&self, corpus: &Corpus, tok: &Tokenizer) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = tok.len();
        m.max_seq_len = m.max_seq_len.max(longest_sequence(corpus, tok) + 4);
        m
    }
}

/// Longest `[bos] question answer [eos]` over every string pairing the
/// pipeline scores or trains on.
pub fn longest_sequence(corpus: &Corpus, tok: &Tokenizer) -> usize {
    let q_len = |s: &str| tok.encode(s).len() + 1;
    let a_len = |s: &str| tok.encode(s).len() + 1;
    let idk = corpus.idk_pool.iter().map(|s| a_len(s)).max().unwrap_or(0);
    corpus
        .qa
        .iter()
        .map(|qa| {
            let q = std::iter::once(&qa.question)
                .chain(&qa.paraphrased_questions)
                .map(|s| q_len(s))
                .max()
                .unwrap_or(0);
            let a = std::iter::once(&qa.answer)
                .chain(&qa.paraphrased_answers)
                .chain(&qa.perturbed_answers)
                .map(|s| a_len(s))
                .max()
                .unwrap_or(0);
            q + a.max(idk)
        })
        .max()
        .unwrap_or(0)
}

pub fn init_model(cfg: &ExperimentConfig, model: &ModelConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.sub_seed(1)))
}

/// Fine-tune on every QA of the corpus.
pub fn train_target(cfg: &ExperimentConfig, corpus: &Corpus, tok: &Tokenizer) -> Result<ModelParams<f32>> {
    let model = cfg.model_config(corpus, tok);
    let data: Vec<Example> = corpus.full_training_set().iter().map(|qa| encode_qa(tok, qa)).collect();
    Ok(finetune(init_model(cfg, &model)?, &data, &cfg.pretrain_config(2))?.0)
}

/// Fine-tune on every QA except the forget split.
pub fn train_retain(cfg: &ExperimentConfig, corpus: &Corpus, tok: &Tokenizer) -> Result<ModelParams<f32>> {
    let model = cfg.model_config(corpus, tok);
    let data: Vec<Example> = corpus.retain_training_set().iter().map(|qa| encode_qa(tok, qa)).collect();
    Ok(finetune(init_model(cfg, &model)?, &data, &cfg.pretrain_config(3))?.0)
}

/// Which augmentations ULD trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataVariant {
    pub paraphrases: bool,
    pub perturbed: bool,
}

impl Default for DataVariant {
    fn default() -> Self {
        Self {
            paraphrases: true,
            perturbed: true,
        }
    }
}

/// Training data for `method`: D_f'/D_r' for ULD, D_f/D_r otherwise, plus
/// a refusal per forget example for DPO.
pub fn unlearn_data(corpus: &Corpus, tok: &Tokenizer, method: Method, variant: DataVariant, seed: u64) -> Result<UnlearnData> {
    let d_f = corpus.forget();
    let d_r = corpus.retain();
    let (forget, retain): (Vec<QaExample>, Vec<QaExample>) = if method == Method::Uld {
        let forget = if variant.paraphrases {
            corpus.augmented.forget_prime.clone()
        } else {
            d_f.iter().map(|qa| QaExample::original(qa)).collect()
        };
        let mode = if variant.perturbed { RetainAugment::Perturb } else { RetainAugment::Plain };
        (forget, augment_retain(&d_r, &d_f, mode)?)
    } else {
        (
            d_f.iter().map(|qa| QaExample::original(qa)).collect(),
            d_r.iter().map(|qa| QaExample::original(qa)).collect(),
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idk = if method.forget_loss() == Some(ForgetLoss::Dpo) {
        forget
            .iter()
            .map(|e| {
                let refusal = &corpus.idk_pool[rng.random_range(0..corpus.idk_pool.len())];
                Example::encode(tok, &e.question, refusal)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(UnlearnData {
        forget: encode_examples(tok, &forget),
        retain: encode_examples(tok, &retain),
        idk,
    })
}

/// Corpus, trained target and retain models, and their evaluations.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub corpus: Corpus,
    pub tokenizer: Tokenizer,
    pub target: Arc<ModelParams<f32>>,
    pub retain_model: ModelParams<f32>,
    /// The retain model's truth ratios on D_f, the forget-quality reference.
    pub retain_ratios: Vec<f64>,
    pub target_report: EvalReport,
    pub retain_report: EvalReport,
    pub target_scores: Scores,
    pub pretrain_seconds: f64,
}

impl Prepared {
    pub fn from_models(
        cfg: ExperimentConfig,
        corpus: Corpus,
        tokenizer: Tokenizer,
        target: ModelParams<f32>,
        retain_model: ModelParams<f32>,
    ) -> Result<Self> {
        let max_len = target.config.max_seq_len;
        let ev = Evaluator {
            corpus: &corpus,
            tokenizer: &tokenizer,
            reference_ratios: None,
            max_len,
        };
        let (_, retain_scores) = ev.evaluate(&retain_model)?;
        let retain_ratios = retain_scores
            .forget
            .iter()
            .map(|r| Ok(record_truth_ratio(r)?.value))
            .collect::<Result<Vec<f64>>>()?;
        let retain_report = retain_scores.report(Some(&retain_ratios))?;
        let target_scores = crate::eval::score_corpus(&target, &tokenizer, &corpus, max_len)?;
        let target_report = target_scores.report(Some(&retain_ratios))?;
        Ok(Self {
            cfg,
            corpus,
            tokenizer,
            target: Arc::new(target),
            retain_model,
            retain_ratios,
            target_report,
            retain_report,
            target_scores,
            pretrain_seconds: 0.0,
        })
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            corpus: &self.corpus,
            tokenizer: &self.tokenizer,
            reference_ratios: Some(self.retain_ratios.clone()),
            max_len: self.target.config.max_seq_len,
        }
    }

    /// Run one method; `out_dir` receives the run artifacts.
    pub fn run(&self, method: Method, variant: DataVariant, out_dir: Option<&Path>) -> Result<RunRecord> {
        self.run_with(&self.cfg.unlearn_config(method), variant, out_dir)
    }

    pub fn run_with(&self, train: &TrainConfig, variant: DataVariant, out_dir: Option<&Path>) -> Result<RunRecord> {
        let data = unlearn_data(&self.corpus, &self.tokenizer, train.loss.method, variant, train.seed ^ 0xD0)?;
        let ev = self.evaluator();
        let setup = UnlearnSetup {
            target: &self.target,
            cfg: train,
            assistant: &self.cfg.assistant,
            combiner: &self.cfg.combiner,
            evaluator: Some(&ev),
            target_report: Some(&self.target_report),
            out_dir,
        };
        Ok(unlearn(&setup, &data)?.0)
    }

    /// Write corpus, vocabulary, model checkpoints and reference reports.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save(dir.join("corpus.json"))?;
        self.tokenizer.save(dir.join("vocab.json"))?;
        save_model(&self.target, dir.join("target.uldc"))?;
        save_model(&self.retain_model, dir.join("retain.uldc"))?;
        self.target_report.save_json(dir.join("target_report.json"))?;
        self.retain_report.save_json(dir.join("retain_report.json"))?;
        write_jsonl(dir.join("target_scores.jsonl"), &self.target_scores.all())?;
        let path = dir.join("experiment.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&path, e))
    }

    /// Rebuild from a directory written by [`save`](Self::save).
    pub fn load(cfg: ExperimentConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corpus = Corpus::load(dir.join("corpus.json"))?;
        let tokenizer = Tokenizer::load(dir.join("vocab.json"))?;
        let target = load_model(dir.join("target.uldc"))?;
        let retain = load_model(dir.join("retain.uldc"))?;
        Self::from_models(cfg, corpus, tokenizer, target, retain)
    }
}

/// Generate the corpus and train both reference models.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let start = Instant::now();
    let corpus = generate_corpus(&cfg.corpus_config())?;
    let tok = corpus.tokenizer();
    let target = train_target(cfg, &corpus, &tok)?;
    let retain = train_retain(cfg, &corpus, &tok)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut p = Prepared::from_models(cfg.clone(), corpus, tok, target, retain)?;
    p.pretrain_seconds = seconds;
    Ok(p)
}

/// Reload the learner a run saved as `checkpoint` (relative to `run_dir`).
pub fn load_learner(
    run: &RunRecord,
    run_dir: &Path,
    checkpoint: &str,
    target: &Arc<ModelParams<f32>>,
) -> Result<Learner<f32>> {
    let path = run_dir.join(checkpoint);
    Ok(match run.method {
        Method::Conventional { .. } => Learner::Model(load_model(path)?),
        Method::Uld => Learner::Assistant(load_assistant(path, Arc::clone(target))?),
        Method::Offset { .. } => Learner::Offset {
            phi: load_model(path)?,
            phi0: load_model(run_dir.join("ckpt").join(OFFSET_REFERENCE))?,
        },
    })
}

/// Re-score every checkpoint of a finished run; epoch 0 is the target.
pub fn evaluate_run(p: &Prepared, run_dir: &Path) -> Result<Vec<ReportRow>> {
    let run = RunRecord::load(run_dir)?;
    let ev = p.evaluator();
    let combiner = run.combiner.clone().unwrap_or_else(|| p.cfg.combiner.clone());
    let mut rows = vec![ReportRow::new("target", 0, &p.target_report)];
    let name = run.method.to_string();
    for e in run.epochs.iter().filter(|e| e.epoch > 0) {
        if e.checkpoint.is_empty() {
            return Err(Error::Contract(format!("epoch {} of {name} has no checkpoint", e.epoch)));
        }
        let learner = load_learner(&run, run_dir, &e.checkpoint, &p.target)?;
        let src = learner.combined(&p.target, &combiner, run.config.loss.offset_alpha)?;
        let (report, _) = ev.evaluate(&src)?;
        rows.push(ReportRow::new(&name, e.epoch, &report));
    }
    Ok(rows)
}

/// One best-epoch row of summary.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub best_epoch: usize,
    pub forget_quality: f64,
    pub forget_rouge: f64,
    pub model_utility: f64,
    pub retain_rouge: f64,
    pub perplexity: f64,
    pub trainable_fraction: f64,
    pub seconds_per_epoch: f64,
}

pub fn summarize(run: &RunRecord) -> Result<SummaryRow> {
    let best = run
        .best_epoch()
        .ok_or_else(|| Error::Contract(format!("{} has no unlearning epochs", run.method)))?;
    Ok(SummaryRow {
        method: run.method.to_string(),
        best_epoch: best.epoch,
        forget_quality: best.forget_quality,
        forget_rouge: best.forget_rouge,
        model_utility: best.model_utility,
        retain_rouge: best.retain_rouge,
        perplexity: best.holdout_retain_ce.exp(),
        trainable_fraction: run.trainable_fraction(),
        seconds_per_epoch: run.seconds_per_epoch(),
    })
}

pub fn write_summary(dir: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(&path, e))
}

/// Forget quality against model utility for every epoch of every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub method: String,
    pub epoch: usize,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub forget_ce: f64,
    pub holdout_retain_ce: f64,
}

pub fn write_trajectory(path: impl AsRef<Path>, runs: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for run in runs {
        for e in &run.epochs {
            w.serialize(TrajectoryRow {
                method: run.method.to_string(),
                epoch: e.epoch,
                forget_quality: e.forget_quality,
                model_utility: e.model_utility,
                forget_ce: e.forget_ce,
                holdout_retain_ce: e.holdout_retain_ce,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
