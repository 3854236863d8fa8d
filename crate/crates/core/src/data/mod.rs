//! Synthetic fictional-author QA benchmark: corpus generation, forget/retain
//! splits, augmentation and the word-level tokenizer.

pub mod pools;
mod templates;
mod tokenizer;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use templates::{render_answer, render_question, AttrKind, AUTHOR_KINDS, FACT_KINDS, FORMS};
pub use tokenizer::{split, Tokenizer, BOS, EOS, PAD, SPECIALS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Fictional,
    Famous,
    Fact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub id: String,
    pub name: String,
    pub group: Group,
    pub attributes: BTreeMap<AttrKind, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub group: Group,
    /// Author name or country.
    pub subject: String,
    pub kind: AttrKind,
    /// Surface form of the original question/answer.
    pub form: usize,
    /// Attribute value phrase, verbatim inside every correct answer.
    pub value: String,
    pub question: String,
    pub answer: String,
    pub paraphrased_questions: Vec<String>,
    pub paraphrased_answers: Vec<String>,
    /// Same template as `answer`, different value.
    pub perturbed_answers: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Paraphrase,
    Perturbed,
}

/// One item of an augmented set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub source: String,
    pub origin: Origin,
    pub question: String,
    pub answer: String,
}

impl QaExample {
    fn of(qa: &QaPair, origin: Origin, question: &str, answer: &str) -> Self {
        Self {
            source: qa.id.clone(),
            origin,
            question: question.to_string(),
            answer: answer.to_string(),
        }
    }

    pub fn original(qa: &QaPair) -> Self {
        Self::of(qa, Origin::Original, &qa.question, &qa.answer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_authors: usize,
    pub qa_per_author: usize,
    pub forget_fraction: f64,
    pub n_famous: usize,
    /// Paraphrased variants per forget QA entering D_f' (each rewrites both
    /// question and answer).
    pub n_paraphrases: usize,
    pub n_perturbed: usize,
    /// |D_r|; defaults to |D_f| when absent.
    pub retain_size: Option<usize>,
    /// Cap on each held-out evaluation group.
    pub eval_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_authors: 50,
            qa_per_author: 8,
            forget_fraction: 0.1,
            n_famous: 8,
            n_paraphrases: 2,
            n_perturbed: 2,
            retain_size: None,
            eval_size: 40,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub forget: Vec<String>,
    /// D_r: the retain sample visible to unlearning methods.
    pub retain: Vec<String>,
    /// Retain-author QAs outside D_r.
    pub holdout: Vec<String>,
    pub famous: Vec<String>,
    pub facts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augmented {
    pub forget_prime: Vec<QaExample>,
    pub retain_prime: Vec<QaExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub authors: Vec<AuthorProfile>,
    pub countries: Vec<AuthorProfile>,
    pub qa: Vec<QaPair>,
    pub splits: Splits,
    pub augmented: Augmented,
    pub idk_pool: Vec<String>,
    pub forget_authors: Vec<String>,
}

/// How D_r' is assembled from D_r.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainAugment {
    /// D_r plus forget questions paired with perturbed answers.
    Perturb,
    /// D_r' = D_r.
    Plain,
}

/// Number of forget authors for a fraction, `⌈f·n⌉`.
pub fn forget_author_count(n_authors: usize, fraction: f64) -> usize {
    ((fraction * n_authors as f64) - 1e-9).ceil().max(1.0) as usize
}

fn perturbed_values(kind: AttrKind, truth: &str, n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let v = kind.sample_value(rng);
        if v != truth && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn make_qa(
    id: String,
    group: Group,
    subject: &str,
    kind: AttrKind,
    value: &str,
    cfg: &CorpusConfig,
    rng: &mut impl Rng,
) -> QaPair {
    let form = rng.random_range(0..FORMS);
    let others: Vec<usize> = (1..FORMS).map(|o| (form + o) % FORMS).collect();
    let wrong = perturbed_values(kind, value, cfg.n_perturbed, rng);
    QaPair {
        id,
        group,
        subject: subject.to_string(),
        kind,
        form,
        value: value.to_string(),
        question: render_question(kind, form, subject),
        answer: render_answer(kind, form, value),
        paraphrased_questions: others.iter().map(|&f| render_question(kind, f, subject)).collect(),
        paraphrased_answers: others.iter().map(|&f| render_answer(kind, f, value)).collect(),
        perturbed_answers: wrong.iter().map(|w| render_answer(kind, form, w)).collect(),
    }
}

fn draw_names(rng: &mut impl Rng, first: &[&str], last: &[&str], n: usize) -> Vec<String> {
    let mut f: Vec<&str> = first.to_vec();
    let mut l: Vec<&str> = last.to_vec();
    f.shuffle(rng);
    l.shuffle(rng);
    f.iter().zip(&l).take(n).map(|(a, b)| format!("{a} {b}")).collect()
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_authors < 2 {
            return Err(Error::Config("n_authors must be at least 2".into()));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::Config("forget_fraction must lie in (0, 1)".into()));
        }
        if forget_author_count(self.n_authors, self.forget_fraction) >= self.n_authors {
            return Err(Error::Config("forget split would leave no retain authors".into()));
        }
        if self.qa_per_author == 0 || self.qa_per_author > AUTHOR_KINDS.len() {
            return Err(Error::Config(format!(
                "qa_per_author must be in 1..={}",
                AUTHOR_KINDS.len()
            )));
        }
        if self.n_paraphrases >= FORMS {
            return Err(Error::Config(format!(
                "only {} paraphrase templates exist per question type",
                FORMS - 1
            )));
        }
        if self.n_perturbed == 0 {
            return Err(Error::Config("n_perturbed must be at least 1".into()));
        }
        // The smallest value pool (continents) has five entries.
        if self.n_perturbed > 4 {
            return Err(Error::Capacity(format!(
                "{} perturbed answers requested, smallest value pool allows 4",
                self.n_perturbed
            )));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("eval_size must be positive".into()));
        }
        let cap = pools::FIRST_NAMES.len().min(pools::LAST_NAMES.len());
        if self.n_authors > cap {
            return Err(Error::Capacity(format!(
                "{} authors requested, name pools hold {cap}",
                self.n_authors
            )));
        }
        let famous_cap = pools::FAMOUS_FIRST.len().min(pools::FAMOUS_LAST.len());
        if self.n_famous > famous_cap {
            return Err(Error::Capacity(format!(
                "{} famous authors requested, pools hold {famous_cap}",
                self.n_famous
            )));
        }
        Ok(())
    }
}

/// Deterministic corpus for `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kinds = &AUTHOR_KINDS[..cfg.qa_per_author];

    let mut authors = Vec::new();
    let mut qa = Vec::new();
    let groups = [
        (Group::Fictional, "a", pools::FIRST_NAMES, pools::LAST_NAMES, cfg.n_authors),
        (Group::Famous, "m", pools::FAMOUS_FIRST, pools::FAMOUS_LAST, cfg.n_famous),
    ];
    for (group, prefix, first, last, n) in groups {
        for (i, name) in draw_names(&mut rng, first, last, n).into_iter().enumerate() {
            let id = format!("{prefix}{i:02}");
            let mut attributes = BTreeMap::new();
            for &kind in kinds {
                // Father and mother draw from the same occupation pool.
                let value = loop {
                    let v = kind.sample_value(&mut rng);
                    if !attributes.values().any(|x| x == &v) {
                        break v;
                    }
                };
                attributes.insert(kind, value);
            }
            for (&kind, value) in &attributes {
                qa.push(make_qa(
                    format!("{id}-{}", kind.name()),
                    group,
                    &name,
                    kind,
                    value,
                    cfg,
                    &mut rng,
                ));
            }
            authors.push(AuthorProfile {
                id,
                name,
                group,
                attributes,
            });
        }
    }

    let mut countries = Vec::new();
    for (i, &(country, capital, continent, language)) in pools::COUNTRIES.iter().enumerate() {
        let id = format!("c{i:02}");
        let attributes: BTreeMap<AttrKind, String> = FACT_KINDS
            .iter()
            .zip([capital, continent, language])
            .map(|(&k, v)| (k, v.to_string()))
            .collect();
        for (&kind, value) in &attributes {
            qa.push(make_qa(
                format!("{id}-{}", kind.name()),
                Group::Fact,
                country,
                kind,
                value,
                cfg,
                &mut rng,
            ));
        }
        countries.push(AuthorProfile {
            id,
            name: country.to_string(),
            group: Group::Fact,
            attributes,
        });
    }

    // Author-level split.
    let mut order: Vec<usize> = (0..cfg.n_authors).collect();
    order.shuffle(&mut rng);
    let n_forget = forget_author_count(cfg.n_authors, cfg.forget_fraction);
    let mut forget_authors: Vec<String> = order[..n_forget].iter().map(|&i| authors[i].id.clone()).collect();
    forget_authors.sort();
    let is_forget = |qa: &QaPair| {
        qa.group == Group::Fictional && forget_authors.iter().any(|a| qa.id.starts_with(&format!("{a}-")))
    };
    let forget: Vec<String> = qa.iter().filter(|q| is_forget(q)).map(|q| q.id.clone()).collect();
    let mut retain_pool: Vec<String> = qa
        .iter()
        .filter(|q| q.group == Group::Fictional && !is_forget(q))
        .map(|q| q.id.clone())
        .collect();
    retain_pool.shuffle(&mut rng);
    let n_retain = cfg.retain_size.unwrap_or(forget.len()).min(retain_pool.len());
    let holdout = retain_pool.split_off(n_retain);
    let mut retain = retain_pool;
    retain.sort();
    let mut famous: Vec<String> = qa.iter().filter(|q| q.group == Group::Famous).map(|q| q.id.clone()).collect();
    famous.shuffle(&mut rng);
    let mut facts: Vec<String> = qa.iter().filter(|q| q.group == Group::Fact).map(|q| q.id.clone()).collect();
    facts.shuffle(&mut rng);

    let mut corpus = Corpus {
        config: cfg.clone(),
        authors,
        countries,
        qa,
        splits: Splits {
            forget,
            retain,
            holdout,
            famous,
            facts,
        },
        augmented: Augmented::default(),
        idk_pool: pools::IDK_POOL.iter().map(|s| s.to_string()).collect(),
        forget_authors,
    };
    let d_f = corpus.forget();
    let d_r = corpus.retain();
    let forget_prime = augment_forget(&d_f, cfg.n_paraphrases)?;
    let retain_prime = augment_retain(&d_r, &d_f, RetainAugment::Perturb)?;
    corpus.augmented = Augmented {
        forget_prime,
        retain_prime,
    };
    Ok(corpus)
}

/// D_f' = D_f plus `n_paraphrases` rewritten (question, answer) variants per QA.
pub fn augment_forget(d_f: &[&QaPair], n_paraphrases: usize) -> Result<Vec<QaExample>> {
    let mut out = Vec::with_capacity(d_f.len() * (1 + n_paraphrases));
    for qa in d_f {
        if qa.paraphrased_questions.len() < n_paraphrases || qa.paraphrased_answers.len() < n_paraphrases {
            return Err(Error::Config(format!(
                "{} has fewer than {n_paraphrases} paraphrase templates",
                qa.id
            )));
        }
        out.push(QaExample::original(qa));
        for j in 0..n_paraphrases {
            out.push(QaExample::of(
                qa,
                Origin::Paraphrase,
                &qa.paraphrased_questions[j],
                &qa.paraphrased_answers[j],
            ));
        }
    }
    Ok(out)
}

/// D_r' from D_r, optionally injecting forget questions with wrong answers.
pub fn augment_retain(d_r: &[&QaPair], d_f: &[&QaPair], mode: RetainAugment) -> Result<Vec<QaExample>> {
    let mut out: Vec<QaExample> = d_r.iter().map(|qa| QaExample::original(qa)).collect();
    if mode == RetainAugment::Plain {
        return Ok(out);
    }
    for qa in d_f {
        if qa.perturbed_answers.len() < 2 {
            return Err(Error::Contract(format!("{} has fewer than two perturbed answers", qa.id)));
        }
        for wrong in &qa.perturbed_answers {
            out.push(QaExample::of(qa, Origin::Perturbed, &qa.question, wrong));
        }
    }
    Ok(out)
}

impl Corpus {
    fn lookup(&self, ids: &[String]) -> Vec<&QaPair> {
        let index: HashMap<&str, &QaPair> = self.qa.iter().map(|q| (q.id.as_str(), q)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&QaPair> {
        self.qa.iter().find(|q| q.id == id)
    }

    pub fn forget(&self) -> Vec<&QaPair> {
        self.lookup(&self.splits.forget)
    }

    pub fn retain(&self) -> Vec<&QaPair> {
        self.lookup(&self.splits.retain)
    }

    pub fn holdout(&self) -> Vec<&QaPair> {
        self.lookup(&self.splits.holdout)
    }

    pub fn famous(&self) -> Vec<&QaPair> {
        self.lookup(&self.splits.famous)
    }

    pub fn facts(&self) -> Vec<&QaPair> {
        self.lookup(&self.splits.facts)
    }

    /// Evaluation subsets of the three retain groups, each capped at `eval_size`.
    pub fn eval_groups(&self) -> [(&'static str, Vec<&QaPair>); 3] {
        let n = self.config.eval_size;
        fn cap(mut v: Vec<&QaPair>, n: usize) -> Vec<&QaPair> {
            v.truncate(n);
            v
        }
        [
            ("holdout", cap(self.holdout(), n)),
            ("famous", cap(self.famous(), n)),
            ("facts", cap(self.facts(), n)),
        ]
    }

    /// Everything the target model is trained on.
    pub fn full_training_set(&self) -> Vec<&QaPair> {
        self.qa.iter().collect()
    }

    /// Target training data minus the forget split.
    pub fn retain_training_set(&self) -> Vec<&QaPair> {
        let forget: std::collections::HashSet<&str> = self.splits.forget.iter().map(String::as_str).collect();
        self.qa.iter().filter(|q| !forget.contains(q.id.as_str())).collect()
    }

    /// Every string the corpus can emit, for vocabulary construction.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for q in &self.qa {
            out.push(q.question.as_str());
            out.push(q.answer.as_str());
            out.extend(q.paraphrased_questions.iter().map(String::as_str));
            out.extend(q.paraphrased_answers.iter().map(String::as_str));
            out.extend(q.perturbed_answers.iter().map(String::as_str));
        }
        out.extend(self.idk_pool.iter().map(String::as_str));
        out
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::build(self.texts())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A tokenized (prompt, answer) pair. The prompt starts with `<bos>`, the
/// answer ends with `<eos>`; loss is masked to the answer span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn encode(tok: &Tokenizer, question: &str, answer: &str) -> Self {
        let mut prompt = vec![BOS];
        prompt.extend(tok.encode(question));
        let mut ans = tok.encode(answer);
        ans.push(EOS);
        Self { prompt, answer: ans }
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logit rows whose next token belongs to the answer.
    pub fn answer_rows(&self) -> std::ops::Range<usize> {
        self.prompt.len() - 1..self.len() - 1
    }
}

pub fn encode_qa(tok: &Tokenizer, qa: &QaPair) -> Example {
    Example::encode(tok, &qa.question, &qa.answer)
}

pub fn encode_examples(tok: &Tokenizer, items: &[QaExample]) -> Vec<Example> {
    items.iter().map(|e| Example::encode(tok, &e.question, &e.answer)).collect()
}
