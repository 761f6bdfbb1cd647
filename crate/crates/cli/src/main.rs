//! `gradkd`: command-line front end for the desk-scale distillation lab.
//!
//! Every subcommand is a thin shell around the library: parse arguments,
//! resolve the experiment config (TOML file plus flag overrides), call one
//! library entry point, write the run artifacts, and print a short summary.
//! All failures surface as a single diagnostic line and a nonzero exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradkd::data::{generate, load_dataset, save_dataset, Example, GeneratorSpec, SyntheticData};
use gradkd::dropout_bias::{cosine_similarity_report, quadratic_identity_sweep};
use gradkd::harness::{
    distill, eval_loyalty, grid_search, train_teacher, write_run_artifacts, ExperimentConfig,
    GridSpec, Method, ReportFormat, RunResult, TaskSpec,
};
use gradkd::model::{load_checkpoint, save_checkpoint, Model};

#[derive(Parser)]
#[command(
    name = "gradkd",
    version,
    about = "Desk-scale laboratory for gradient-aligned knowledge distillation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification dataset directory.
    GenData(GenDataArgs),
    /// Train a teacher with plain cross-entropy and save its checkpoint.
    TrainTeacher(RunArgs),
    /// Train a student against a teacher checkpoint with one method.
    Distill(DistillArgs),
    /// Two-stage hyperparameter search around a base config.
    Grid(GridArgs),
    /// Compare two checkpoints' behavior on a dataset split.
    EvalLoyalty(EvalLoyaltyArgs),
    /// Check the dropout gradient-bias identity and measure its reach.
    VerifyDropoutBias(VerifyDropoutBiasArgs),
    /// Render signed input-gradient saliency for one or more checkpoints.
    SaliencyReport(SaliencyReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::TrainTeacher(args) => cmd_train_teacher(&args),
        Command::Distill(args) => cmd_distill(&args),
        Command::Grid(args) => cmd_grid(&args),
        Command::EvalLoyalty(args) => cmd_eval_loyalty(&args),
        Command::VerifyDropoutBias(args) => cmd_verify_dropout_bias(&args),
        Command::SaliencyReport(args) => cmd_saliency_report(&args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

// ── Shared argument blocks ───────────────────────────────────────────────

/// Which split of a dataset directory to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn of(self, data: &SyntheticData) -> &[Example] {
        match self {
            Split::Train => &data.train,
            Split::Val => &data.val,
            Split::Test => &data.test,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, gradkd::Error> {
    Method::from_str(s)
}

fn parse_format(s: &str) -> Result<ReportFormat, gradkd::Error> {
    ReportFormat::from_str(s)
}

/// Experiment config source plus the flag overrides shared by the training
/// subcommands. Flags win over the file; the file wins over the built-in
/// desk-scale defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML). Omitted → desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method: finetune, vanilla_kd, bert_pkd, gkd, or gkd_cls.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for config.snapshot, metrics.csv, result.json, …
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Read the task from a gen-data directory instead of generating it.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Soft/hard cross-entropy mix.
    #[arg(long)]
    alpha: Option<f64>,
    /// Distillation temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Hidden-state or gradient alignment weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Combined-objective alignment weight (gkd_cls).
    #[arg(long)]
    gamma: Option<f64>,
    /// Keep student dropout active for gradient-aligning methods.
    #[arg(long)]
    dropout_ablation: bool,
}

impl ConfigArgs {
    /// Builds the effective config: file (or defaults) plus overrides,
    /// validated as a whole at the end.
    fn resolve(&self, default_method: Method) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => {
                let Some(dir) = &self.output_dir else {
                    bail!("--output-dir is required when no --config file is given");
                };
                ExperimentConfig::desk_scale(self.method.unwrap_or(default_method), dir)
            }
        };
        if let Some(m) = self.method {
            config.method = m;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(dir) = &self.dataset_dir {
            config.task = TaskSpec::from_dir(dir);
        }
        if let Some(e) = self.epochs {
            config.optimizer.epochs = e;
        }
        if let Some(b) = self.batch_size {
            config.optimizer.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            config.optimizer.learning_rate = lr;
        }
        if let Some(a) = self.alpha {
            config.weights.alpha = a;
        }
        if let Some(t) = self.tau {
            config.weights.tau = t;
        }
        if let Some(b) = self.beta {
            config.weights.beta = b;
        }
        if let Some(g) = self.gamma {
            config.weights.gamma = g;
        }
        if self.dropout_ablation {
            config.dropout_ablation = true;
        }
        config.validate()?;
        Ok(config)
    }
}

// ── gen-data ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct GenDataArgs {
    /// Directory for train.tsv, val.tsv, test.tsv, and meta.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Content words; the vocabulary adds [CLS] and [PAD] on top.
    #[arg(long, default_value_t = 998)]
    vocab_words: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    /// Longest sentence in tokens (must stay below the model's max_len).
    #[arg(long, default_value_t = 31)]
    max_len: usize,
    /// Fraction of examples whose label is re-rolled uniformly.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = GeneratorSpec {
        n_classes: args.classes,
        vocab_words: args.vocab_words,
        n_train: args.train,
        n_val: args.val,
        n_test: args.test,
        min_len: args.min_len,
        max_len: args.max_len,
        noise_rate: args.noise,
    };
    let data = generate(&spec, args.seed)?;
    save_dataset(&args.out, &data, &spec, args.seed)?;
    println!(
        "wrote {}/{}/{} examples ({} classes, vocab {}) to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.n_classes,
        data.vocab.size(),
        args.out.display()
    );
    Ok(())
}

// ── train-teacher / distill ──────────────────────────────────────────────

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

fn print_epochs(result: &RunResult) {
    println!("epoch  train_loss  train_acc  val_loss  val_acc");
    for e in &result.epochs {
        println!(
            "{:>5}  {:>10.4}  {:>8.2}%  {:>8.4}  {:>6.2}%",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    println!("test accuracy: {:.2}%", result.test_accuracy);
}

fn cmd_train_teacher(args: &RunArgs) -> Result<()> {
    let config = args.config.resolve(Method::Finetune)?;
    let (model, result) = train_teacher(&config)?;
    write_run_artifacts(&config.output_dir, &config, &result)?;
    let ckpt = config.output_dir.join("teacher.ckpt");
    save_checkpoint(&model, &ckpt)?;
    print_epochs(&result);
    println!("checkpoint: {}", ckpt.display());
    println!("artifacts: {}", config.output_dir.display());
    Ok(())
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint produced by train-teacher.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_distill(args: &DistillArgs) -> Result<()> {
    let config = args.config.resolve(Method::GkdCls)?;
    let teacher = load_checkpoint(&args.teacher)
        .with_context(|| format!("loading {}", args.teacher.display()))?;
    let (student, result) = distill(&config, &teacher)?;
    write_run_artifacts(&config.output_dir, &config, &result)?;
    let ckpt = config.output_dir.join("student.ckpt");
    save_checkpoint(&student, &ckpt)?;
    println!("method: {}  seed: {}", config.method, config.seed);
    print_epochs(&result);
    if let Some(l) = &result.loyalty {
        println!(
            "loyalty vs teacher: label {:.1}  probability {:.1}  saliency {:.1}  ({} of {} excluded)",
            l.label_loyalty, l.probability_loyalty, l.saliency_loyalty, l.sl_excluded, l.n_examples
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("artifacts: {}", config.output_dir.display());
    Ok(())
}

// ── grid ─────────────────────────────────────────────────────────────────

#[derive(Args)]
struct GridArgs {
    /// Teacher checkpoint shared by every run.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Stage-1 alpha values (default 0.2,0.5,0.7).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Stage-1 temperature values (default 5,10,20).
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Stage-2 sweep values: beta, or gamma for gkd_cls.
    #[arg(long, value_delimiter = ',')]
    stage2: Option<Vec<f64>>,
    /// Beta pinned during the gkd_cls stage-2 gamma sweep.
    #[arg(long)]
    fixed_beta: Option<f64>,
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    let config = args.config.resolve(Method::GkdCls)?;
    let teacher = load_checkpoint(&args.teacher)
        .with_context(|| format!("loading {}", args.teacher.display()))?;
    let mut spec = GridSpec::defaults(config.method)?;
    if let Some(a) = &args.alphas {
        spec.alphas = a.clone();
    }
    if let Some(t) = &args.taus {
        spec.taus = t.clone();
    }
    if let Some(s) = &args.stage2 {
        spec.stage2 = s.clone();
    }
    if let Some(b) = args.fixed_beta {
        spec.fixed_beta = b;
    }
    spec.validate(config.method)?;

    let outcome = grid_search(&config, &teacher, &spec)?;
    fs::create_dir_all(&config.output_dir)?;
    let table = config.output_dir.join("grid.json");
    fs::write(&table, serde_json::to_string_pretty(&outcome)? + "\n")?;

    println!("stage  method      alpha  tau    beta    gamma  val_acc");
    for run in &outcome.runs {
        let acc = match (run.val_accuracy, &run.error) {
            (Some(v), _) => format!("{v:.2}%"),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "-".into(),
        };
        println!(
            "{:<5}  {:<10}  {:<5}  {:<5}  {:<6}  {:<5}  {acc}",
            run.stage, run.method, run.alpha, run.tau, run.beta, run.gamma
        );
    }
    let w = &outcome.best_weights;
    println!(
        "best: alpha {}  tau {}  beta {}  gamma {}  (val {:.2}%)",
        w.alpha, w.tau, w.beta, w.gamma, outcome.best_val_accuracy
    );
    println!("table: {}", table.display());
    Ok(())
}

// ── eval-loyalty ─────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalLoyaltyArgs {
    /// Reference checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Checkpoint being judged.
    #[arg(long)]
    student: PathBuf,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval_loyalty(args: &EvalLoyaltyArgs) -> Result<()> {
    let teacher = load_checkpoint(&args.teacher)
        .with_context(|| format!("loading {}", args.teacher.display()))?;
    let student = load_checkpoint(&args.student)
        .with_context(|| format!("loading {}", args.student.display()))?;
    let data = load_dataset(&args.data)?;
    let report = eval_loyalty(&teacher, &student, args.split.of(&data), &data.vocab, args.batch_size)?;
    println!(
        "label loyalty:       {:.2}\nprobability loyalty: {:.2}\nsaliency loyalty:    {:.2}",
        report.label_loyalty, report.probability_loyalty, report.saliency_loyalty
    );
    println!(
        "examples: {}  (saliency excluded: {})",
        report.n_examples, report.sl_excluded
    );
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("report: {}", path.display());
    }
    Ok(())
}

// ── verify-dropout-bias ──────────────────────────────────────────────────

#[derive(Args)]
struct VerifyDropoutBiasArgs {
    #[command(subcommand)]
    check: DropoutBiasCheck,
}

#[derive(Subcommand)]
enum DropoutBiasCheck {
    /// Exhaustive mask enumeration vs the closed form on random quadratics.
    Quadratics {
        /// Number of random quadratics.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Dimensions are drawn from 1..=max-dim (mask enumeration is 2^d).
        #[arg(long, default_value_t = 10)]
        max_dim: usize,
        /// Dropout rates to probe.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,0.9")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable |exact − closed form| per coordinate.
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Monte Carlo cosine study on a trained checkpoint: how far dropout
    /// pushes the expected gradient off the dropout-off direction, per
    /// gradient target from the input embeddings up the layer stack.
    Cosines {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Dropout rate applied during sampling.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Monte Carlo mask draws per example.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Measure only the first N examples of the split (0 = all).
        #[arg(long, default_value_t = 200)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn cmd_verify_dropout_bias(args: &VerifyDropoutBiasArgs) -> Result<()> {
    match &args.check {
        DropoutBiasCheck::Quadratics { count, max_dim, deltas, seed, tolerance } => {
            let table = quadratic_identity_sweep(*count, *max_dim, deltas, *seed)?;
            println!("{count} random quadratics, dimension ≤ {max_dim}, seed {seed}");
            println!("{:<8} {:>14}", "delta", "worst |gap|");
            for (delta, gap) in &table {
                println!("{delta:<8} {gap:>14.3e}");
            }
            let worst = table.iter().fold(0.0f64, |w, (_, g)| w.max(*g));
            if worst > *tolerance {
                bail!("identity violated: worst gap {worst:.3e} exceeds tolerance {tolerance:.1e}");
            }
            println!("identity holds within {tolerance:.1e}");
            Ok(())
        }
        DropoutBiasCheck::Cosines { model, data, split, delta, samples, limit, seed, out } => {
            let model = load_checkpoint(model)
                .with_context(|| format!("loading {}", model.display()))?;
            let dataset = load_dataset(data)?;
            check_model_fits_data(&model, &dataset)?;
            let examples = split.of(&dataset);
            let examples = match *limit {
                0 => examples,
                n => &examples[..n.min(examples.len())],
            };
            let report = cosine_similarity_report(&model, examples, *delta, *samples, *seed)?;
            print!("{report}");
            if let Some(path) = out {
                fs::write(path, report.to_csv())?;
                println!("table: {}", path.display());
            }
            Ok(())
        }
    }
}

// ── saliency-report ──────────────────────────────────────────────────────

#[derive(Args)]
struct SaliencyReportArgs {
    /// Checkpoint to render, as name=path. Repeat to compare models.
    #[arg(long = "model", value_name = "NAME=PATH", required = true)]
    models: Vec<String>,
    /// Dataset directory; supplies the vocabulary and default sentences.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Render the first N sentences of the split.
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Extra sentence of space-separated vocabulary words. Repeatable;
    /// when present, replaces the split sentences entirely.
    #[arg(long = "sentence", value_name = "WORDS")]
    sentences: Vec<String>,
    /// ansi (terminal colors) or html.
    #[arg(long, value_parser = parse_format, default_value = "ansi")]
    format: ReportFormat,
    /// Output file; required for html, optional for ansi (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_saliency_report(args: &SaliencyReportArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let mut models: Vec<(String, Model)> = Vec::new();
    for entry in &args.models {
        let Some((name, path)) = entry.split_once('=') else {
            bail!("--model takes name=path, got {entry:?}");
        };
        let model = load_checkpoint(Path::new(path))
            .with_context(|| format!("loading {path}"))?;
        check_model_fits_data(&model, &data)?;
        models.push((name.to_string(), model));
    }
    let named: Vec<(String, &Model)> =
        models.iter().map(|(n, m)| (n.clone(), m)).collect();

    let sentences: Vec<Vec<usize>> = if args.sentences.is_empty() {
        if args.count == 0 {
            bail!("--count must be at least 1 when no --sentence is given");
        }
        args.split
            .of(&data)
            .iter()
            .take(args.count)
            .map(|e| e.tokens.clone())
            .collect()
    } else {
        args.sentences
            .iter()
            .map(|s| {
                s.split_whitespace()
                    .map(|w| data.vocab.id(w))
                    .collect::<gradkd::Result<Vec<usize>>>()
            })
            .collect::<gradkd::Result<_>>()?
    };

    let report = gradkd::harness::saliency_report(&named, &sentences, &data.vocab, args.format)?;
    match (&args.out, args.format) {
        (Some(path), _) => {
            fs::write(path, &report)?;
            println!("report: {}", path.display());
        }
        (None, ReportFormat::Ansi) => print!("{report}"),
        (None, ReportFormat::Html) => bail!("--out is required for html output"),
    }
    Ok(())
}

// ── Shared checks ────────────────────────────────────────────────────────

/// A checkpoint only makes sense against data it was trained for: the
/// vocabulary must match and every sentence must fit under max_len with
/// room for the prepended [CLS].
fn check_model_fits_data(model: &Model, data: &SyntheticData) -> Result<()> {
    let config = model.config();
    if config.vocab_size != data.vocab.size() {
        bail!(
            "checkpoint vocabulary ({}) does not match the dataset ({})",
            config.vocab_size,
            data.vocab.size()
        );
    }
    if config.n_classes != data.n_classes {
        bail!(
            "checkpoint has {} classes but the dataset has {}",
            config.n_classes,
            data.n_classes
        );
    }
    let longest = [&data.train, &data.val, &data.test]
        .iter()
        .flat_map(|s| s.iter())
        .map(|e| e.tokens.len())
        .max()
        .unwrap_or(0);
    if longest + 1 > config.max_len {
        bail!(
            "dataset sentences reach {} tokens; checkpoint max_len {} cannot fit them plus [CLS]",
            longest,
            config.max_len
        );
    }
    Ok(())
}
