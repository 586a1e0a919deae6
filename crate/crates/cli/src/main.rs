//! `surgvl`: curate clip-caption manifests, generate synthetic corpora,
//! train, and run zero-shot phase recognition.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use surgvl::model::VideoClip;
use surgvl::pipeline::{self, HttpCaptionClient, Manifest, Split, StubCaptioner, TranscriptFileAsr};
use surgvl::synthetic::{self, SyntheticSpec};
use surgvl::trainer;
use surgvl::zeroshot::{self, PromptBank};

use config::{ModelFlags, PipelineFlags, RunConfig, TrainFlags};

const MANIFEST_FILE: &str = "manifest.jsonl";
const RUN_LOG: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "surgvl", version, about = "Surgical video-language pre-training at desk scale")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Curate a manifest from narrated source videos.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Generate a synthetic phase corpus.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Pre-train on a manifest's training split.
    Train(TrainArgs),
    /// Zero-shot phase recognition.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    Build(PipelineArgs),
}

#[derive(Debug, clap::Args)]
struct PipelineArgs {
    /// Directory holding `videos.jsonl` and the files it references.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; its `pipeline` object is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Caption service endpoint. Without it captions come from the
    /// deterministic stub.
    #[arg(long)]
    caption_url: Option<String>,
    /// Per-request timeout for the caption service, in seconds.
    #[arg(long, default_value_t = 60.0)]
    caption_timeout: f64,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    Build(SynthArgs),
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    phases: usize,
    /// Clips per phase.
    #[arg(long, default_value_t = 100)]
    clips: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that frame references resolve against; defaults to the
    /// manifest's directory.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Prompt bank for per-epoch validation: a TSV file, `cholec80` or
    /// `autolaparo`.
    #[arg(long)]
    prompts: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Accuracy and F1 at one frame count.
    Zeroshot(ZeroshotArgs),
    /// One evaluation per frame count.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, clap::Args)]
struct EvalInputs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A TSV file, `cholec80` or `autolaparo`.
    #[arg(long)]
    prompts: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ZeroshotArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, default_value_t = 4)]
    frames: usize,
}

#[derive(Debug, clap::Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, value_delimiter = ',', default_values_t = zeroshot::DEFAULT_ABLATION_FRAMES)]
    frames: Vec<usize>,
}

struct RunLog {
    command: &'static str,
    config: Value,
    seeds: Value,
    metrics: Value,
}

impl RunLog {
    fn write(self, out: &Path, elapsed: Duration) -> Result<()> {
        let log = json!({
            "command": self.command,
            "args": std::env::args().skip(1).collect::<Vec<_>>(),
            "config": self.config,
            "seeds": self.seeds,
            "versions": {
                "surgvl": env!("CARGO_PKG_VERSION"),
                "checkpoint": trainer::CHECKPOINT_VERSION,
                "archive": surgvl::archive::FORMAT_VERSION,
            },
            "metrics": self.metrics,
            "elapsed_secs": elapsed.as_secs_f64(),
        });
        let path = out.join(RUN_LOG);
        std::fs::write(&path, serde_json::to_string_pretty(&log)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn manifest_base(manifest: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(b) => b.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn prompt_bank(spec: &str) -> Result<PromptBank> {
    match spec {
        "cholec80" => Ok(PromptBank::cholec80()),
        "autolaparo" => Ok(PromptBank::autolaparo()),
        path => PromptBank::load(Path::new(path)).with_context(|| format!("reading prompts {path}")),
    }
}

fn pipeline_build(args: &PipelineArgs) -> Result<RunLog> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg = RunConfig::from_file(path, cfg)?;
    }
    args.flags.apply(&mut cfg.pipeline);
    let videos = pipeline::load_sources(&args.input)?;
    let manifest = match &args.caption_url {
        Some(url) => {
            let client = HttpCaptionClient::new(url.clone(), Duration::from_secs_f64(args.caption_timeout));
            pipeline::build_manifest(&videos, &args.input, &TranscriptFileAsr, &client, &cfg.pipeline)?
        }
        None => pipeline::build_manifest(&videos, &args.input, &TranscriptFileAsr, &StubCaptioner, &cfg.pipeline)?,
    };
    create_out(&args.out)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    let stats = &manifest.stats;
    println!(
        "{} videos, {} clips kept ({:.2} h), {} dropped",
        videos.len(),
        stats.kept,
        stats.kept_hours,
        stats.dropped.values().sum::<usize>()
    );
    Ok(RunLog {
        command: "pipeline build",
        config: json!({ "pipeline": cfg.pipeline, "input": args.input }),
        seeds: json!({}),
        metrics: serde_json::to_value(stats)?,
    })
}

fn synth_build(args: &SynthArgs) -> Result<RunLog> {
    let mut spec = SyntheticSpec::new(args.phases, args.clips);
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.noise_level = args.noise.unwrap_or(spec.noise_level);
    spec.image_size = args.image_size.unwrap_or(spec.image_size);
    spec.frames_per_clip = args.frames.unwrap_or(spec.frames_per_clip);
    let manifest = synthetic::build_synthetic_corpus(&spec, &args.out)?;
    let count = |s| manifest.kept_in(s).count();
    let (train, val, test) = (count(Split::Train), count(Split::Val), count(Split::Test));
    println!("{} clips: {train} train, {val} val, {test} test", manifest.entries.len());
    Ok(RunLog {
        command: "synth build",
        seeds: json!({ "corpus": spec.seed }),
        config: serde_json::to_value(&spec)?,
        metrics: json!({ "train": train, "val": val, "test": test }),
    })
}

fn train(args: &TrainArgs) -> Result<RunLog> {
    let mut cfg = RunConfig {
        model: args.model.preset.model(),
        ..RunConfig::default()
    };
    if let Some(path) = &args.config {
        cfg = RunConfig::from_file(path, cfg)?;
    }
    args.model.apply(&mut cfg.model);
    args.train.apply(&mut cfg.train);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let manifest = read_manifest(&args.manifest)?;
    let base = manifest_base(&args.manifest, args.base.as_deref());
    let bank = args.prompts.as_deref().map(prompt_bank).transpose()?;
    create_out(&args.out)?;
    let outcome = trainer::train(&manifest, &base, cfg.model.clone(), cfg.train.clone(), bank.as_ref(), &args.out)?;
    let first = outcome.history.first().map(|b| b.total);
    let last = outcome.history.last().map(|b| b.total);
    for e in &outcome.epochs {
        match e.val_accuracy {
            Some(acc) => println!("epoch {:>3}  loss {:.4}  val acc {:.1}%", e.epoch, e.mean_loss.total, 100.0 * acc),
            None => println!("epoch {:>3}  loss {:.4}", e.epoch, e.mean_loss.total),
        }
    }
    println!("checkpoint: {}", outcome.last_checkpoint.display());
    Ok(RunLog {
        command: "train",
        seeds: json!({ "train": cfg.train.seed }),
        config: json!({
            "model": cfg.model,
            "train": cfg.train,
            "pipeline": cfg.pipeline,
            "manifest": args.manifest,
            "base": base,
            "prompts": args.prompts,
        }),
        metrics: json!({
            "steps": outcome.state.step,
            "first_loss": first,
            "final_loss": last,
            "vocab_size": outcome.state.tokenizer.vocab_size(),
            "epochs": outcome.epochs,
            "best_epoch": outcome.best_epoch,
            "best_checkpoint": outcome.best_checkpoint,
            "last_checkpoint": outcome.last_checkpoint,
        }),
    })
}

struct EvalSetup {
    state: trainer::TrainState,
    bank: PromptBank,
    clips: Vec<VideoClip>,
}

fn eval_setup(inputs: &EvalInputs) -> Result<EvalSetup> {
    let state = trainer::load_checkpoint(&inputs.checkpoint)
        .with_context(|| format!("loading checkpoint {}", inputs.checkpoint.display()))?;
    let bank = prompt_bank(&inputs.prompts)?;
    let manifest = read_manifest(&inputs.manifest)?;
    let base = manifest_base(&inputs.manifest, inputs.base.as_deref());
    let clips = manifest
        .kept_in(inputs.split.into())
        .map(|e| e.load_clip(&base, None))
        .collect::<surgvl::Result<Vec<_>>>()?;
    if clips.is_empty() {
        bail!("no kept clips in the {:?} split of {}", inputs.split, inputs.manifest.display());
    }
    create_out(&inputs.out)?;
    Ok(EvalSetup { state, bank, clips })
}

fn eval_config(inputs: &EvalInputs, state: &trainer::TrainState) -> Value {
    json!({
        "manifest": inputs.manifest,
        "checkpoint": inputs.checkpoint,
        "prompts": inputs.prompts,
        "split": format!("{:?}", inputs.split).to_lowercase(),
        "model": state.model.config,
        "train": state.config,
    })
}

fn eval_zeroshot(args: &ZeroshotArgs) -> Result<RunLog> {
    let s = eval_setup(&args.inputs)?;
    let result = zeroshot::evaluate(&s.clips, &s.state.model, &s.state.tokenizer, &s.bank, args.frames)?;
    let path = args.inputs.out.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&result)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} clips, k={}: accuracy {:.1}%, macro F1 {:.1}%",
        result.num_clips,
        result.k_frames,
        100.0 * result.accuracy,
        100.0 * result.macro_f1
    );
    Ok(RunLog {
        command: "eval zeroshot",
        config: eval_config(&args.inputs, &s.state),
        seeds: json!({ "train": s.state.config.seed }),
        metrics: serde_json::to_value(&result)?,
    })
}

fn eval_ablate(args: &AblateArgs) -> Result<RunLog> {
    let s = eval_setup(&args.inputs)?;
    let table = zeroshot::frame_ablation(&s.clips, &s.state.model, &s.state.tokenizer, &s.bank, &args.frames)?;
    table.write(&args.inputs.out)?;
    print!("{}", table.to_text());
    Ok(RunLog {
        command: "eval ablate",
        config: eval_config(&args.inputs, &s.state),
        seeds: json!({ "train": s.state.config.seed }),
        metrics: serde_json::to_value(&table)?,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (log, out) = match &cli.command {
        Command::Pipeline(PipelineCommand::Build(a)) => (pipeline_build(a)?, &a.out),
        Command::Synth(SynthCommand::Build(a)) => (synth_build(a)?, &a.out),
        Command::Train(a) => (train(a)?, &a.out),
        Command::Eval(EvalCommand::Zeroshot(a)) => (eval_zeroshot(a)?, &a.inputs.out),
        Command::Eval(EvalCommand::Ablate(a)) => (eval_ablate(a)?, &a.inputs.out),
    };
    log.write(out, start.elapsed())
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut line = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !line.contains(&text) {
            if !line.is_empty() {
                line.push_str(": ");
            }
            line.push_str(&text);
        }
    }
    line
}

fn main() -> ExitCode {
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
