use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use uld_core::data::{augment_retain, generate_corpus, Corpus, RetainAugment, Tokenizer};
use uld_core::engine::RunRecord;
use uld_core::eval::write_report_csv;
use uld_core::experiment::{
    evaluate_run, summarize, train_retain, train_target, write_summary, write_trajectory, DataVariant, ExperimentConfig,
    Prepared,
};
use uld_core::model::checkpoint::{load_model, save_model};
use uld_core::model::ModelParams;
use uld_core::objectives::Method;
use uld_core::Error;

#[derive(Parser)]
#[command(name = "uld", version, about = "Unlearning experiments on a synthetic author corpus")]
struct Cli {
    /// JSON experiment config; absent fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for corpus, checkpoints and runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides ULD_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write corpus.json, vocab.json and manifest.json.
    GenCorpus,
    /// Fine-tune the target model on the full corpus.
    TrainTarget {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the retain model on everything except the forget split.
    TrainRetain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run unlearning methods into <out>/runs/<method>.
    Unlearn {
        /// Method tag such as GA+KL, OFFSET-NPO+KL or ULD.
        #[arg(long, required_unless_present = "all", conflicts_with = "all")]
        method: Option<String>,
        /// Every configured method, building missing models first.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Re-score every checkpoint of a run into <run>/report.csv.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Best-epoch summary of finished runs into <out>/summary.{csv,json}.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("ULD_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("ULD_SEED={s:?} is not an unsigned integer")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is missing; run `uld {hint}` first", path.display())).into())
    }
}

fn load_corpus(dir: &Path) -> Result<(Corpus, Tokenizer)> {
    require(&dir.join("corpus.json"), "gen-corpus")?;
    let corpus = Corpus::load(dir.join("corpus.json"))?;
    let tok = Tokenizer::load(dir.join("vocab.json"))?;
    Ok((corpus, tok))
}

fn gen_corpus(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let corpus = generate_corpus(&cfg.corpus_config())?;
    let tok = corpus.tokenizer();
    corpus.save(dir.join("corpus.json"))?;
    tok.save(dir.join("vocab.json"))?;
    let retain_prime = augment_retain(&corpus.retain(), &corpus.forget(), RetainAugment::Perturb)?;
    let manifest = json!({
        "seed": cfg.seed,
        "authors": corpus.authors.len(),
        "qa_pairs": corpus.qa.len(),
        "forget": corpus.forget().len(),
        "retain": corpus.retain().len(),
        "holdout": corpus.holdout().len(),
        "famous": corpus.famous().len(),
        "facts": corpus.facts().len(),
        "forget_prime": corpus.augmented.forget_prime.len(),
        "retain_prime": retain_prime.len(),
        "vocab_size": tok.len(),
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn train(cfg: &ExperimentConfig, name: &str, epochs: Option<usize>) -> Result<ModelParams<f32>> {
    let (corpus, tok) = load_corpus(&cfg.out_dir)?;
    let mut cfg = cfg.clone();
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let start = std::time::Instant::now();
    let model = match name {
        "target" => train_target(&cfg, &corpus, &tok)?,
        _ => train_retain(&cfg, &corpus, &tok)?,
    };
    let path = cfg.out_dir.join(format!("{name}.uldc"));
    save_model(&model, &path)?;
    eprintln!(
        "{name}: {} parameters, {:.1}s, wrote {}",
        model.count_total(),
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(model)
}

/// Load corpus and both reference models; with `build`, create what is missing.
fn prepared(cfg: &ExperimentConfig, build: bool) -> Result<Prepared> {
    let dir = &cfg.out_dir;
    if build && !dir.join("corpus.json").exists() {
        gen_corpus(cfg)?;
    }
    let mut models = Vec::new();
    for name in ["target", "retain"] {
        let path = dir.join(format!("{name}.uldc"));
        let model = if build && !path.exists() {
            train(cfg, name, None)?
        } else {
            require(&path, &format!("train-{name}"))?;
            load_model(&path)?
        };
        models.push(model);
    }
    let (corpus, tok) = load_corpus(dir)?;
    let retain = models.pop().expect("retain model");
    let target = models.pop().expect("target model");
    Ok(Prepared::from_models(cfg.clone(), corpus, tok, target, retain)?)
}

fn unlearn(cfg: &ExperimentConfig, methods: &[Method], all: bool, epochs: Option<usize>, lr: Option<f64>) -> Result<()> {
    let p = prepared(cfg, all)?;
    p.target_report.save_json(cfg.out_dir.join("target_report.json"))?;
    p.retain_report.save_json(cfg.out_dir.join("retain_report.json"))?;
    let runs_dir = cfg.out_dir.join("runs");
    let mut runs = Vec::new();
    for &method in methods {
        let mut train = cfg.unlearn_config(method);
        if let Some(e) = epochs {
            train.epochs = e;
        }
        if let Some(lr) = lr {
            train.lr = lr;
        }
        let dir = runs_dir.join(method.slug());
        eprintln!("{method}: {} epochs at lr {}", train.epochs, train.lr);
        let run = p.run_with(&train, DataVariant::default(), Some(&dir))?;
        let row = summarize(&run)?;
        println!(
            "{method}: best epoch {} forget quality {:.4} model utility {:.4} forget ROUGE-L {:.3} -> {}",
            row.best_epoch,
            row.forget_quality,
            row.model_utility,
            row.forget_rouge,
            dir.display()
        );
        runs.push(run);
    }
    if all {
        write_trajectory(runs_dir.join("trajectory.csv"), &runs)?;
        let rows = runs.iter().map(summarize).collect::<uld_core::Result<Vec<_>>>()?;
        write_summary(&runs_dir, &rows)?;
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    require(&run.join("run.json"), "unlearn")?;
    let p = prepared(cfg, false)?;
    let rows = evaluate_run(&p, run)?;
    for r in &rows {
        println!(
            "{:>14} epoch {:>2}: forget quality {:.4} model utility {:.4} forget ROUGE-L {:.3} retain ROUGE-L {:.3}",
            r.model, r.epoch, r.forget_quality, r.model_utility, r.forget_rouge, r.retain_rouge
        );
    }
    write_report_csv(run.join("report.csv"), &rows)?;
    Ok(())
}

fn report(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> Result<()> {
    let rows = dirs
        .iter()
        .map(|d| {
            let run = RunRecord::load(d).with_context(|| format!("loading run {}", d.display()))?;
            Ok(summarize(&run)?)
        })
        .collect::<Result<Vec<_>>>()?;
    write_summary(&cfg.out_dir, &rows)?;
    for r in &rows {
        println!(
            "{:>14} best epoch {:>2}: F.Q. {:.4} forget R-L {:.3} M.U. {:.4} retain R-L {:.3} ppl {:.3} trainable {:.4} {:.3}s/epoch",
            r.method,
            r.best_epoch,
            r.forget_quality,
            r.forget_rouge,
            r.model_utility,
            r.retain_rouge,
            r.perplexity,
            r.trainable_fraction,
            r.seconds_per_epoch
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenCorpus => gen_corpus(&cfg),
        Command::TrainTarget { epochs } => train(&cfg, "target", *epochs).map(drop),
        Command::TrainRetain { epochs } => train(&cfg, "retain", *epochs).map(drop),
        Command::Unlearn { method, all, epochs, lr } => {
            let methods = match method {
                Some(tag) => vec![tag.parse::<Method>()?],
                None => cfg.methods.clone(),
            };
            unlearn(&cfg, &methods, *all, *epochs, *lr)
        }
        Command::Eval { run } => eval(&cfg, run),
        Command::Report { runs } => report(&cfg, runs),
    }
}

/// 2 configuration, 3 frozen-parameter violation, 4 non-finite loss, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::FrozenMutation(_)) => 3,
        Some(Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
