use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hgnmn_core::builder::SelectParams;
use hgnmn_core::controller::{Ablation, RunOptions};
use hgnmn_core::gradsuite::{run_gradient_suite, SuiteConfig};
use hgnmn_core::io::{
    format_embeddings, load_annotations, parse_embeddings, read_dataset, read_to_string,
    write_dataset, write_json, write_string, AnnotationPaths, Checkpoint,
};
use hgnmn_core::synthetic::{build_graphs, SceneAnnotations, World};
use hgnmn_core::trace::ReasoningTrace;
use hgnmn_core::train::{evaluate, generate_data, train_with_hook, DataSplit, Metrics, TrainConfig};

#[derive(Parser)]
#[command(name = "hgnmn", version, about = "Hierarchical graph neural module network")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print metrics as JSON.
    Eval(EvalArgs),
    /// Export the reasoning trace of one task as JSON.
    Trace(TraceArgs),
    /// Generate synthetic train/test splits.
    GenData(GenDataArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Build the three graph layers from annotation files.
    Build(BuildArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// vg, sg, kg, and, filter, relate or crossgraph; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    /// Directory with train.jsonl, test.jsonl and embeddings.txt from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Replaces the ablation stored in the checkpoint.
    #[arg(long)]
    ablate: Vec<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; the task at --index is traced.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Drop trailing steps whose top module is NoOp.
    #[arg(long)]
    omit_noop: bool,
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    triples: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = hgnmn_core::builder::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    metrics: &'a Metrics,
    seed: u64,
    ablation: Vec<&'static str>,
}

fn load_config(path: &Path, seed: Option<u64>, ablate: &[String]) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .usage()?;
    let mut config: TrainConfig = toml::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .usage()?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.ablate.extend(ablate.iter().cloned());
    config
        .validate()
        .with_context(|| format!("invalid config {}", path.display()))
        .usage()?;
    Ok(config)
}

fn load_data_dir(dir: &Path) -> anyhow::Result<DataSplit> {
    let emb_path = dir.join("embeddings.txt");
    let embeddings = parse_embeddings(&read_to_string(&emb_path)?, &emb_path)?;
    Ok(DataSplit {
        world: World { embeddings },
        train: read_dataset(&dir.join("train.jsonl"))?,
        test: read_dataset(&dir.join("test.jsonl"))?,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config, args.seed, &args.ablate)?;
    if let Some(e) = args.epochs {
        config.epochs = e;
        config.validate().usage()?;
    }
    let ablation = config.ablation().usage()?;
    let data = match &args.data {
        Some(dir) => load_data_dir(dir).runtime()?,
        None => generate_data(&config).runtime()?,
    };
    let outcome = train_with_hook(&config, &data.world, &data.train, &data.test, |epoch, loss, _| {
        log::info!("epoch {}/{}: loss {loss:.4}", epoch + 1, config.epochs);
    })
    .runtime()?;

    let snapshot = serde_json::to_value(&config).runtime()?;
    Checkpoint::new(&outcome.model, snapshot, ablation.clone(), outcome.rng.clone())
        .save(&args.out.join("checkpoint.json"))
        .runtime()?;
    write_dataset(&args.out.join("test.jsonl"), &data.test).runtime()?;
    let file = MetricsFile {
        metrics: &outcome.metrics,
        seed: config.seed,
        ablation: ablation.flags(),
    };
    write_json(&args.out.join("metrics.json"), &file).runtime()?;
    eprintln!(
        "accuracy {:.4} on {} held-out tasks; wrote {}",
        outcome.metrics.accuracy,
        outcome.metrics.examples,
        args.out.display()
    );
    Ok(())
}

fn ablation_or(stored: Ablation, flags: &[String]) -> Result<Ablation, Failure> {
    if flags.is_empty() {
        Ok(stored)
    } else {
        Ablation::from_flags(flags).usage()
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint).runtime()?;
    let ablation = ablation_or(ckpt.ablation.clone(), &args.ablate)?;
    let model = ckpt.into_model().runtime()?;
    let tasks = read_dataset(&args.data).runtime()?;
    let metrics = evaluate(&model, &tasks, &ablation).runtime()?;
    println!("{}", serde_json::to_string_pretty(&metrics).runtime()?);
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint).runtime()?;
    let ablation = ablation_or(ckpt.ablation.clone(), &args.ablate)?;
    let model = ckpt.into_model().runtime()?;
    let tasks = read_dataset(&args.data).runtime()?;
    let task = tasks
        .get(args.index)
        .ok_or_else(|| anyhow!("index {} out of range for {} tasks", args.index, tasks.len()))
        .usage()?;
    let mut trace =
        ReasoningTrace::record(&model, &task.graphs, &task.question, &RunOptions::with_ablation(ablation))
            .runtime()?;
    if args.omit_noop {
        trace.omit_trailing_noops();
    }
    let text = serde_json::to_string_pretty(&trace).runtime()?;
    match args.out {
        Some(path) => write_string(&path, &(text + "\n")).runtime()?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, args.seed, &[])?;
    let data = generate_data(&config).runtime()?;
    write_string(&args.out.join("embeddings.txt"), &format_embeddings(&data.world.embeddings)).runtime()?;
    write_dataset(&args.out.join("train.jsonl"), &data.train).runtime()?;
    write_dataset(&args.out.join("test.jsonl"), &data.test).runtime()?;
    eprintln!(
        "wrote {} train and {} test tasks to {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), Failure> {
    if args.instances == 0 {
        return Err(anyhow!("--instances must be positive")).usage();
    }
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(anyhow!("--eps must be positive")).usage();
    }
    let cfg = SuiteConfig {
        instances: args.instances,
        seed: args.seed,
        eps: args.eps,
        ..SuiteConfig::default()
    };
    let entries = run_gradient_suite(&cfg).runtime()?;
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:<20} {:>4} instances {:>7} coords  max rel err {:.3e}  {}",
            e.component,
            e.instances,
            e.coordinates,
            e.max_error,
            if e.passed { "ok" } else { "FAIL" }
        );
        if !e.passed {
            failed += 1;
            if let Some(w) = &e.worst {
                println!("    worst: {w}");
            }
        }
    }
    if failed > 0 {
        return Err(anyhow!("{failed} component(s) failed the gradient check")).runtime();
    }
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<(), Failure> {
    let paths = AnnotationPaths {
        detections: args.detections,
        captions: args.captions,
        triples: args.triples,
        embeddings: args.embeddings,
    };
    let ann = load_annotations(&paths).runtime()?;
    let scene = SceneAnnotations {
        detections: ann.detections,
        captions: ann.captions,
        triples: ann.triples,
    };
    let select = SelectParams {
        k: args.top_k,
        ..SelectParams::default()
    };
    let graphs = build_graphs(&scene, &ann.embeddings, select).runtime()?;
    write_json(&args.out, &graphs).runtime()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Build(a) => cmd_build(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
