//! `conrft`: data collection, encoder and classifier training, offline and
//! online fine-tuning, evaluation and the operator gateway.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use conrft_core::envs::EnvKind;

#[derive(Parser)]
#[command(name = "conrft", version, about = "Consistency-policy fine-tuning on simulated manipulation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record noisy expert demonstrations as JSONL.
    Collect(CollectArgs),
    /// Pretrain and freeze the visual encoder.
    PretrainEncoder(PretrainArgs),
    /// Train the success classifier on a frozen encoder.
    ClassifierTrain(ClassifierArgs),
    /// Conservative offline training on demonstrations.
    TrainOffline(TrainArgs),
    /// Online fine-tuning from an offline checkpoint.
    TrainOnline(OnlineArgs),
    /// Behavior-cloning baseline.
    TrainSft(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Stream a policy to the operator console and accept takeovers.
    Serve(ServeArgs),
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|e: conrft_core::Error| e.to_string())
}

#[derive(Args)]
pub struct CollectArgs {
    #[arg(long, value_parser = parse_env)]
    pub env: EnvKind,
    /// Number of trajectories [default: per-task demo count]
    #[arg(long)]
    pub n: Option<usize>,
    /// Operator noise [default: per-task demo noise]
    #[arg(long)]
    pub noise: Option<f64>,
    /// First reset seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep failed episodes instead of retrying until `n` succeed.
    #[arg(long)]
    pub keep_failures: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ClassifierArgs {
    #[arg(long, value_parser = parse_env)]
    pub env: EnvKind,
    /// Encoder bundle (or any checkpoint carrying one).
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub demos: PathBuf,
    /// Must match the demonstrations when given.
    #[arg(long, value_parser = parse_env)]
    pub env: Option<EnvKind>,
    /// Encoder bundle; pretrained from scratch when omitted.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum IntervenerKind {
    Scripted,
    Remote,
    None,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("reward").required(true).args(["classifier", "oracle_reward"])))]
pub struct OnlineArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub demos: PathBuf,
    /// Classifier bundle trained on the checkpoint's encoder.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Reward from the simulator's ground-truth success instead.
    #[arg(long)]
    pub oracle_reward: bool,
    #[arg(long, value_enum, default_value_t = IntervenerKind::Scripted)]
    pub intervener: IntervenerKind,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Replaces the checkpoint's training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = parse_env)]
    pub env: Option<EnvKind>,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ServeArgs {
    /// Policy to run; the arm stands still without one.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_env)]
    pub env: Option<EnvKind>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Control rate in steps per second.
    #[arg(long, default_value_t = 10.0)]
    pub hz: f64,
    /// Stop after this many episodes; runs until killed otherwise.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<config::ConfigError>().is_some()
            || matches!(c.downcast_ref::<conrft_core::Error>(), Some(conrft_core::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match &cli.command {
        Command::Collect(a) => commands::collect(a),
        Command::PretrainEncoder(a) => commands::pretrain_encoder(a),
        Command::ClassifierTrain(a) => commands::classifier_train(a),
        Command::TrainOffline(a) => commands::train_offline_cmd(a),
        Command::TrainOnline(a) => commands::train_online_cmd(a),
        Command::TrainSft(a) => commands::train_sft_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if is_config_error(&e) { ("config", 3) } else { ("runtime", 1) };
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
            ExitCode::from(code)
        }
    }
}
