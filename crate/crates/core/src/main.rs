//! `toremi` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 aborted at runtime.

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use toremi::annotate::{
    annotate_corpus, AnnotateError, Embedder, FileEmbedder, HashedNgramEmbedder, HttpCompletionClient, Labeler,
    LlmLabeler, MockLabeler, ProgressFiles, PromptTemplates, Taxonomy,
};
use toremi::config::{ConfigError, Override, RunConfig};
use toremi::corpus::{self, CorpusError, Sample, Vocab};
use toremi::eval::{self, EvalError, RunFiles};
use toremi::trainer::{Checkpoint, TrainError, Trainer};
use toremi::{Strategy, ToyModel};

const CORPUS_FILE: &str = "corpus.jsonl";
const HELDOUT_FILE: &str = "heldout.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const EVAL_FILE: &str = "eval.json";

#[derive(Parser)]
#[command(name = "toremi", version, about = "Topic-based loss reweighting toolkit")]
struct Cli {
    /// TOML run config; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed; every component derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set reweighter.beta=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a corpus: embed, cluster, extract keywords, ask a labeler.
    Annotate(AnnotateArgs),
    /// Generate the synthetic per-topic corpus.
    GenCorpus(GenCorpusArgs),
    /// Shuffle the characters of every sample of one topic.
    Corrupt(CorruptArgs),
    /// Train the toy model on a labeled corpus.
    Train(TrainArgs),
    /// Held-out perplexity of a trained run.
    Eval(EvalArgs),
    /// Compare the loss and weight curves of several runs.
    Compare(CompareArgs),
    /// Summarize a weight trace.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory; nothing is written outside it.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[command(flatten)]
    out: OutArg,
    /// Use the offline mock labeler instead of the HTTP endpoint.
    #[arg(long)]
    mock_labeler: bool,
    /// Rules file for the mock labeler (`Label: trigger ...` per line).
    #[arg(long, value_name = "FILE")]
    mock_rules: Option<PathBuf>,
    /// Completion endpoint; defaults to $TOREMI_LABELER_URL.
    #[arg(long, value_name = "URL")]
    labeler_url: Option<String>,
    #[arg(long, value_name = "generate|select")]
    mode: Option<String>,
    #[arg(long, value_name = "FILE")]
    taxonomy: Option<PathBuf>,
    #[arg(long, value_name = "cluster|sample")]
    granularity: Option<String>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    max_labels: Option<u64>,
    /// Leave already-labeled samples untouched.
    #[arg(long)]
    skip_labeled: bool,
    /// Precomputed embeddings, JSONL `{"id", "vector"}`.
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    samples_per_topic: Option<u64>,
    #[arg(long)]
    sequence_length: Option<u64>,
    /// Omit the ground-truth topic labels.
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long)]
    topic: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ReweightFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    interval: Option<u64>,
    #[arg(long)]
    transition: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, value_name = "standard|stage1_only|toremi")]
    strategy: Option<String>,
    #[command(flatten)]
    reweight: ReweightFlags,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    heldout_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// A `train` output directory.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Held-out corpus; defaults to the run's own split.
    #[arg(long, value_name = "FILE")]
    heldout: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct CompareArgs {
    /// `NAME=DIR` or `DIR`; the first run is the baseline.
    #[arg(long = "run", value_name = "NAME=DIR", required = true)]
    runs: Vec<String>,
    /// Loss level for the steps-to-threshold column.
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(e: impl Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }

    fn abort(e: impl Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::invalid(e)
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::invalid(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::Model(_) | TrainError::Reweight(_) | TrainError::Io(_) => {
                Failure::abort(e)
            }
            _ => Failure::invalid(e),
        }
    }
}

impl From<AnnotateError> for Failure {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Aborted { .. } | AnnotateError::Labeler(_) | AnnotateError::OutsideTaxonomy { .. } => {
                Failure::abort(e)
            }
            _ => Failure::invalid(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model { .. } => Failure::abort(e),
            _ => Failure::invalid(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_failed(path: &Path, e: impl Display) -> Failure {
    Failure::abort(format!("cannot write {}: {e}", path.display()))
}

fn prepare_out(dir: &Path, config: &RunConfig) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| write_failed(dir, e))?;
    config.write_resolved(dir).map_err(|e| write_failed(dir, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| write_failed(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| write_failed(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| write_failed(path, e))
}

struct Overrides(Vec<Override>);

impl Overrides {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let mut list = cli
            .set
            .iter()
            .map(|s| Override::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(seed) = cli.seed {
            let seed = i64::try_from(seed).map_err(|_| Failure::invalid("--seed must be below 2^63"))?;
            list.push(Override::new("seed", seed));
        }
        Ok(Self(list))
    }

    fn opt<T: Into<toml::Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.push(Override::new(key, v));
        }
    }

    fn int(&mut self, key: &str, value: Option<u64>) -> CmdResult {
        if let Some(v) = value {
            let v = i64::try_from(v).map_err(|_| Failure::invalid(format!("{key}: value {v} is too large")))?;
            self.0.push(Override::new(key, v));
        }
        Ok(())
    }

    fn path(&mut self, key: &str, value: Option<&PathBuf>) {
        self.opt(key, value.map(|p| p.display().to_string()));
    }

    fn reweight(&mut self, flags: &ReweightFlags) -> CmdResult {
        self.opt("reweighter.alpha", flags.alpha);
        self.opt("reweighter.beta", flags.beta);
        self.opt("reweighter.gamma", flags.gamma);
        self.int("reweighter.interval_steps", flags.interval)?;
        self.int("reweighter.transition_step", flags.transition)
    }

    fn resolve(self, file: Option<&Path>) -> Result<RunConfig, Failure> {
        Ok(RunConfig::resolve(file, &self.0)?)
    }
}

fn gen_corpus(config: &RunConfig, args: &GenCorpusArgs) -> CmdResult {
    let mut samples = corpus::generate_synthetic(&config.synthetic_spec())?;
    if args.unlabeled {
        for s in &mut samples {
            s.labels.clear();
        }
    }
    prepare_out(&args.out.out, config)?;
    let path = args.out.out.join(CORPUS_FILE);
    corpus::save_corpus(&path, &samples).map_err(Failure::abort)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn corrupt(config: &RunConfig, args: &CorruptArgs) -> CmdResult {
    let target = args.out.out.join(CORPUS_FILE);
    if same_file(&args.input, &target) {
        return Err(Failure::invalid("corrupt never rewrites its input; choose another --out"));
    }
    let input = File::open(&args.input)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", args.input.display())))?;
    // corrupt into memory first so a bad topic leaves no partial output
    let mut buf = Vec::new();
    let count = corpus::corrupt_jsonl(BufReader::new(input), &mut buf, &args.topic, config.component_seed("corrupt"))?;
    prepare_out(&args.out.out, config)?;
    fs::write(&target, buf).map_err(|e| write_failed(&target, e))?;
    println!("shuffled {count} sample(s) of topic {:?} into {}", args.topic, target.display());
    Ok(())
}

fn build_labeler(config: &RunConfig, mock: bool) -> Result<Box<dyn Labeler>, Failure> {
    let settings = &config.labeler;
    if mock {
        return Ok(Box::new(match &settings.mock_rules {
            Some(path) => MockLabeler::load_rules(path)?,
            None => MockLabeler::default(),
        }));
    }
    let url = settings.resolved_url().ok_or_else(|| {
        Failure::invalid("no labeler endpoint: set TOREMI_LABELER_URL, labeler.url or --labeler-url, or pass --mock-labeler")
    })?;
    let templates = PromptTemplates::load(settings.generate_template.as_deref(), settings.select_template.as_deref())?;
    let client = HttpCompletionClient::new(url, settings.timeout()).with_retry(settings.attempts, Duration::from_millis(500));
    Ok(Box::new(LlmLabeler::new(client, templates)))
}

fn annotate(config: &RunConfig, args: &AnnotateArgs) -> CmdResult {
    let samples = corpus::load_corpus(&args.input)?;
    let annotate_config = config.annotate_config();
    let taxonomy = config.labeler.taxonomy.as_deref().map(Taxonomy::load).transpose()?;
    let embedder: Box<dyn Embedder> = match &args.embeddings {
        Some(path) => Box::new(FileEmbedder::load(path)?),
        None => Box::new(HashedNgramEmbedder::new(annotate_config.dimension, 3)?),
    };
    let labeler = build_labeler(config, args.mock_labeler)?;

    let out = &args.out.out;
    prepare_out(out, config)?;
    let progress = ProgressFiles::in_dir(out);
    let result = annotate_corpus(
        &samples,
        &annotate_config,
        embedder.as_ref(),
        labeler.as_ref(),
        taxonomy.as_ref(),
        Some(&progress),
    )?;

    let path = out.join(CORPUS_FILE);
    corpus::save_corpus(&path, &result.samples).map_err(Failure::abort)?;
    if let Some(artifacts) = &result.artifacts {
        let assignment: serde_json::Map<String, serde_json::Value> = artifacts
            .sample_ids
            .iter()
            .zip(&artifacts.clusters.assignment)
            .map(|(id, &c)| (id.clone(), json!(c)))
            .collect();
        write_json(
            &out.join("clusters.json"),
            &json!({
                "k": artifacts.clusters.k,
                "iterations": artifacts.clusters.iterations,
                "inertia": artifacts.clusters.inertia,
                "inertia_history": artifacts.clusters.inertia_history,
                "assignment": assignment,
            }),
        )?;
        write_json(&out.join("keywords.json"), &artifacts.keywords)?;
        println!(
            "labeled {} sample(s) in {} cluster(s) with {} labeler job(s)",
            artifacts.sample_ids.len(),
            artifacts.clusters.k,
            artifacts.job_labels.len()
        );
    } else {
        println!("every sample already carries labels; nothing to do");
    }
    for (topic, count) in label_histogram(&result.samples) {
        println!("  {topic}: {count}");
    }
    Ok(())
}

fn label_histogram(samples: &[Sample]) -> std::collections::BTreeMap<String, usize> {
    let mut hist = std::collections::BTreeMap::new();
    for s in samples {
        for l in &s.labels {
            *hist.entry(l.to_string()).or_insert(0) += 1;
        }
    }
    hist
}

fn train(config: &RunConfig, args: &TrainArgs) -> CmdResult {
    let samples = corpus::load_corpus(&args.input)?;
    let train_config = config.train_config();
    if train_config.strategy != Strategy::Standard {
        if let Some(s) = samples.iter().find(|s| s.labels.is_empty()) {
            return Err(TrainError::Unlabeled {
                sample_id: s.id.clone(),
                strategy: train_config.strategy,
            }
            .into());
        }
    }
    let vocab = Vocab::from_corpus(&samples)?;
    let (train_set, heldout) = corpus::split_heldout(&samples, config.heldout_fraction, config.component_seed("split"))?;
    let mut trainer = Trainer::new(&train_set, vocab, train_config)?;

    let out = &args.out.out;
    prepare_out(out, config)?;
    corpus::save_corpus(out.join(HELDOUT_FILE), &heldout).map_err(Failure::abort)?;
    let metrics_path = out.join("metrics.jsonl");
    let trace_path = out.join("trace.jsonl");
    let mut metrics = create(&metrics_path)?;
    let mut trace = create(&trace_path)?;
    let summaries = trainer.run(&mut metrics, &mut trace)?;
    metrics.flush().map_err(|e| write_failed(&metrics_path, e))?;
    trace.flush().map_err(|e| write_failed(&trace_path, e))?;
    write_json(&out.join(CHECKPOINT_FILE), &trainer.checkpoint())?;

    println!(
        "trained {} steps ({}), {} train / {} held-out samples",
        trainer.step(),
        trainer.config().strategy,
        train_set.len(),
        heldout.len()
    );
    if let Some(last) = summaries.last() {
        for (topic, outcome) in &last.labels {
            println!("  {topic}: loss {:.4} weight {:.4}", outcome.loss, outcome.weight);
        }
    }
    Ok(())
}

fn evaluate(args: &EvalArgs) -> CmdResult {
    let checkpoint_path = args.run.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&checkpoint_path)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", checkpoint_path.display())))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Failure::invalid(format!("{}: {e}", checkpoint_path.display())))?;
    let model = ToyModel::from_logits(checkpoint.vocab, checkpoint.theta, checkpoint.learning_rate)
        .map_err(Failure::invalid)?;
    let heldout_path = args.heldout.clone().unwrap_or_else(|| args.run.join(HELDOUT_FILE));
    let heldout = corpus::load_corpus(&heldout_path)?;
    let report = eval::evaluate(&model, &heldout, checkpoint.step)?;

    fs::create_dir_all(&args.out.out).map_err(|e| write_failed(&args.out.out, e))?;
    write_json(&args.out.out.join(EVAL_FILE), &report)?;
    println!("perplexity {:.4} over {} sample(s)", report.overall, report.samples);
    for (topic, ppl) in &report.per_topic {
        println!("  {topic}: {ppl:.4}");
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> CmdResult {
    let runs: Vec<RunFiles> = args
        .runs
        .iter()
        .map(|spec| {
            let (name, dir) = match spec.split_once('=') {
                Some((name, dir)) => (name.to_owned(), PathBuf::from(dir)),
                None => {
                    let dir = PathBuf::from(spec);
                    let name = dir
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| spec.clone());
                    (name, dir)
                }
            };
            RunFiles::from_dir(name, &dir)
        })
        .collect();
    let report = eval::compare_runs(&runs, args.threshold)?;

    let out = &args.out.out;
    fs::create_dir_all(out).map_err(|e| write_failed(out, e))?;
    write_json(&out.join("comparison.json"), &report)?;
    let csv_path = out.join("curves.csv");
    let mut csv = create(&csv_path)?;
    eval::write_curves_csv(&mut csv, &report.curves)
        .and_then(|_| csv.flush())
        .map_err(|e| write_failed(&csv_path, e))?;

    println!("baseline {}, loss threshold {:.4}", report.baseline, report.threshold);
    for run in &report.runs {
        let reached = run
            .threshold_step
            .map_or_else(|| "never".to_owned(), |s| format!("step {s}"));
        let ppl = run
            .perplexity
            .as_ref()
            .map_or_else(String::new, |p| format!(", perplexity {:.4}", p.overall));
        println!(
            "  {}: final loss {:.4}, threshold reached {reached}{ppl}",
            run.name, run.final_mean_loss
        );
    }
    Ok(())
}

fn inspect(config: &RunConfig, args: &InspectArgs) -> CmdResult {
    let bytes = fs::read(&args.trace)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", args.trace.display())))?;
    let trace = eval::parse_trace(&bytes, &args.trace.display().to_string())?;
    let beta = args.beta.unwrap_or(config.reweighter.beta);
    let gamma = args.gamma.unwrap_or(config.reweighter.gamma);
    let report = eval::inspect_trace(&trace, beta, gamma);

    let mut out = io::stdout().lock();
    let transition = report
        .transition_interval
        .map_or_else(|| "none".to_owned(), |i| format!("interval {i}"));
    let _ = writeln!(out, "intervals: {}", report.intervals);
    let _ = writeln!(out, "stage transition: {transition}");
    let _ = writeln!(out, "beta clips (w = {beta}): {}", report.beta_clips);
    let _ = writeln!(out, "gamma floors (w = {gamma}): {}", report.gamma_floors);
    for (topic, t) in &report.topics {
        if t.is_constant() {
            let _ = writeln!(out, "  {topic}: constant {} over {} interval(s)", t.first, t.intervals);
        } else {
            let _ = writeln!(
                out,
                "  {topic}: min {:.4} max {:.4} final {:.4}, {} beta clip(s), {} gamma floor(s)",
                t.min, t.max, t.last, t.beta_clips, t.gamma_floors
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let mut ov = Overrides::new(&cli)?;
    let file = cli.config.as_deref();
    match &cli.command {
        Command::GenCorpus(args) => {
            ov.int("synthetic.samples_per_topic", args.samples_per_topic)?;
            ov.int("synthetic.sequence_length", args.sequence_length)?;
            gen_corpus(&ov.resolve(file)?, args)
        }
        Command::Corrupt(args) => corrupt(&ov.resolve(file)?, args),
        Command::Annotate(args) => {
            ov.opt("annotate.mode", args.mode.clone());
            ov.opt("annotate.granularity", args.granularity.clone());
            ov.int("annotate.k", args.k)?;
            ov.int("annotate.max_labels", args.max_labels)?;
            if args.skip_labeled {
                ov.opt("annotate.skip_labeled", Some(true));
            }
            ov.opt("labeler.url", args.labeler_url.clone());
            ov.path("labeler.taxonomy", args.taxonomy.as_ref());
            ov.path("labeler.mock_rules", args.mock_rules.as_ref());
            annotate(&ov.resolve(file)?, args)
        }
        Command::Train(args) => {
            ov.opt("train.strategy", args.strategy.clone());
            ov.reweight(&args.reweight)?;
            ov.int("train.total_steps", args.total_steps)?;
            ov.int("train.batch_size", args.batch_size)?;
            ov.opt("train.learning_rate", args.learning_rate);
            ov.opt("heldout_fraction", args.heldout_fraction);
            train(&ov.resolve(file)?, args)
        }
        Command::Eval(args) => evaluate(args),
        Command::Compare(args) => compare(args),
        Command::Inspect(args) => {
            ov.opt("reweighter.beta", args.beta);
            ov.opt("reweighter.gamma", args.gamma);
            inspect(&ov.resolve(file)?, args)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
