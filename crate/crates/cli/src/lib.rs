//! Command-line front end: argument parsing, configuration layering and
//! the subcommands. `fgvr` in `main.rs` is a thin wrapper around [`run`].

pub mod commands;
pub mod config;
pub mod serve;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use fgvr_core::harness::SweepParam;
use fgvr_core::{Aggregation, CaptionMode, TextMode};
use serde::de::DeserializeOwned;

pub use config::{AppConfig, BackendsConfig};

/// Invalid input from the user: bad flags, missing files, unknown values.
/// Exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        2
    } else {
        1
    }
}

fn kebab<T: DeserializeOwned>(s: &str) -> T {
    serde_json::from_value(serde_json::Value::String(s.to_string())).expect("listed as a possible value")
}

fn mode_parser() -> impl TypedValueParser<Value = CaptionMode> {
    PossibleValuesParser::new(CaptionMode::ALL.map(CaptionMode::as_str)).map(|s| kebab::<CaptionMode>(&s))
}

fn aggregation_parser() -> impl TypedValueParser<Value = Aggregation> {
    PossibleValuesParser::new(["class-sum", "nearest"]).map(|s| kebab::<Aggregation>(&s))
}

fn text_mode_parser() -> impl TypedValueParser<Value = TextMode> {
    PossibleValuesParser::new(["per-sample", "per-category"]).map(|s| kebab::<TextMode>(&s))
}

fn param_parser() -> impl TypedValueParser<Value = SweepParam> {
    PossibleValuesParser::new(["s", "t", "beta"]).map(|s| s.parse::<SweepParam>().expect("listed"))
}

#[derive(Debug, Parser)]
#[command(name = "fgvr", version, about = "Training-free few-shot fine-grained classification")]
pub struct Cli {
    /// TOML configuration file. `UNIFGVC_*` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent backend requests.
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with a ready-to-use config.
    Synth(SynthArgs),
    /// Build a gallery from K shots per class and save it.
    BuildGallery(BuildArgs),
    /// Classify one image against a saved gallery.
    Classify(ClassifyArgs),
    /// Evaluate one configuration on a manifest's test split.
    Evaluate(EvaluateArgs),
    /// Caption-mode ablation grid over shot settings.
    Ablate(AblateArgs),
    /// Sweep s, t or beta over shot settings.
    Sweep(SweepArgs),
    /// Caption a single image and print the structured description.
    Caption(CaptionArgs),
    /// Serve classification and category insertion over HTTP.
    Serve(ServeArgs),
}

/// Pipeline and retrieval overrides shared by several commands.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    #[arg(long, value_parser = mode_parser())]
    pub mode: Option<CaptionMode>,
    /// Regions per description.
    #[arg(long)]
    pub s: Option<usize>,
    /// Reference classes per description.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, value_parser = text_mode_parser())]
    pub text_mode: Option<TextMode>,
    #[arg(long)]
    pub image_weight: Option<f64>,
    #[arg(long)]
    pub text_weight: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = aggregation_parser())]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Dataset manifest (JSONL). Falls back to `manifest` in the config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the manifest, embeddings, world and config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 128)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 7)]
    pub attrs_per_class: usize,
    /// Tokens shared by ring-adjacent classes.
    #[arg(long, default_value_t = 2)]
    pub overlap: usize,
    #[arg(long, default_value_t = 64)]
    pub image_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub hallucination: f64,
    #[arg(long, default_value_t = 0.0)]
    pub genericity: f64,
    #[arg(long, default_value = "bird")]
    pub superclass: String,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Gallery file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub shots: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Image path or URL.
    #[arg(long, conflicts_with = "id", required_unless_present = "id")]
    pub image: Option<String>,
    /// Manifest record id.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = aggregation_parser())]
    pub aggregation: Option<Aggregation>,
    /// Classes to report, clamped to the gallery's class count.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Evaluate only the first N test records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub shots: Vec<usize>,
    /// A seed count (consecutive from --seed) or a comma-separated list.
    #[arg(long, default_value = "1")]
    pub seeds: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_delimiter = ',', value_parser = mode_parser(),
          default_value = "image,description,structured,random-ref,similar-ref")]
    pub modes: Vec<CaptionMode>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_parser = param_parser())]
    pub param: SweepParam,
    /// Comma-separated values; integer ranges like `1..5` are inclusive.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long, conflicts_with = "id", required_unless_present = "id")]
    pub image: Option<String>,
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Gallery supplying reference candidates for the reference modes.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Superclass for images given by path.
    #[arg(long)]
    pub superclass: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub data: DataArgs,
    /// Write the gallery back to disk after each insertion.
    #[arg(long)]
    pub persist: bool,
}

/// Config file and environment, then global flags.
pub fn effective_config(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.max_in_flight {
        if n == 0 {
            return Err(usage("--max-in-flight must be at least 1"));
        }
        cfg.max_in_flight = n;
    }
    cfg.sync_seed();
    Ok(cfg)
}

/// Runs the parsed command and prints its JSON result.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    let out = match cli.command {
        Command::Serve(a) => return serve::run(cfg, a),
        Command::Synth(a) => commands::synth(cfg, a),
        Command::BuildGallery(a) => commands::build_gallery(cfg, a),
        Command::Classify(a) => commands::classify(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
        Command::Sweep(a) => commands::sweep(cfg, a),
        Command::Caption(a) => commands::caption(cfg, a),
    }?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
