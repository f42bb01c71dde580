mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::CommonFlags;

#[derive(Parser)]
#[command(name = "hsq", version, about = "Hierarchical sparse query transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair of feature pyramids.
    Synth(SynthArgs),
    /// Classify a pyramid pair and report expert routing.
    Forward(ForwardArgs),
    /// Finite-difference audit of the micro model.
    Gradcheck(GradcheckArgs),
    /// Sweep one ablation axis.
    Ablate(AblateArgs),
    /// Time sparse against dense expert routing.
    Bench(BenchArgs),
    /// Classification metrics of a scores CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: CommonFlags,
    #[arg(long)]
    cnn_out: Option<PathBuf>,
    #[arg(long)]
    vit_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    common: CommonFlags,
    #[arg(long)]
    cnn: Option<PathBuf>,
    #[arg(long)]
    vit: Option<PathBuf>,
    /// Load weights instead of building from the seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label; defaults to the cnn file stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = hsq_core::gradreport::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = hsq_core::numerics::gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Entries sampled per tensor; all when absent.
    #[arg(long)]
    max_entries: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Per-group report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: scale the GELU backward pass by this factor.
    #[arg(long, hide = true)]
    fault_gelu: Option<f64>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: CommonFlags,
    /// stage_scheme, stage_ratio, query or moe.
    #[arg(long)]
    axis: String,
    /// Points to run instead of the default grid, e.g. `50x96;100x192`.
    #[arg(long)]
    grid: Option<String>,
    /// Manifest CSV (`id,cnn,vit,label`) of labeled pyramid pairs.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    common: CommonFlags,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Time one block at the configured width instead of the whole model.
    #[arg(long)]
    block: bool,
    #[arg(long, value_enum, default_value_t = commands::Arm::Both)]
    arm: commands::Arm,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// CSV with header `id,group,score,label`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = hsq_core::metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Reduce to one row per group before scoring.
    #[arg(long)]
    by_group: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Forward(a) => commands::forward(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            ExitCode::from(e.exit_code())
        }
    }
}
