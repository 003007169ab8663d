use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdgan_cli::commands::{
    self, CompareArgs, EvalArgs, GenArgs, SynthArgs, TrainArgs,
};

/// Contrast-phase CT phantoms, GAN training, and evaluation.
#[derive(Debug, Parser)]
#[command(name = "cdgan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multiphase CT dataset with train/test manifests.
    GenPhantoms(GenCmd),
    /// Train a model from a train manifest.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalCmd),
    /// Paired t-test between two eval reports.
    Compare(CompareCmd),
    /// Translate one slice to target contrast phases.
    Synthesize(SynthCmd),
}

#[derive(Debug, Args)]
struct GenCmd {
    /// Output directory for volumes and manifests.
    #[arg(long)]
    out: PathBuf,
    /// JSON file of phantom settings; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Subjects drawn per phase for the unpaired training pool.
    #[arg(long, default_value_t = 10)]
    subjects_per_phase: usize,
    /// Fraction of the subject pool that becomes training volumes.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Enhancement overlap in [0, 1]; 1 erases the phase signal.
    #[arg(long)]
    overlap: Option<f64>,
    /// Fraction of training labels to corrupt.
    #[arg(long)]
    label_noise: Option<f64>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    slices_per_volume: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    /// Model kind: cdgan, stargan_d, unet, or resnet.
    #[arg(long)]
    model: String,
    #[arg(long)]
    train_manifest: PathBuf,
    /// Optional manifest evaluated at every checkpoint.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON network config; omitted fields keep their defaults.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Use the small desk-scale network preset.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Total iterations to reach (overrides the config file).
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from a checkpoint; its config is reused as-is.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct CompareCmd {
    /// report.json from the first eval run.
    #[arg(long)]
    report_a: PathBuf,
    /// report.json from the second eval run.
    #[arg(long)]
    report_b: PathBuf,
    /// Optional directory for comparison.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume header (.json) holding the source slice.
    #[arg(long)]
    volume: PathBuf,
    /// Axial slice index within the volume.
    #[arg(long)]
    slice: usize,
    /// Target phase name; omitted means all three.
    #[arg(long)]
    target_phase: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Relative output paths are anchored at `CDGAN_OUT_ROOT` when it is set.
fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_relative() {
        if let Some(root) = std::env::var_os("CDGAN_OUT_ROOT") {
            return PathBuf::from(root).join(path);
        }
    }
    path
}

fn run(cli: Cli) -> cdgan_cli::error::Result<()> {
    match cli.command {
        Command::GenPhantoms(c) => commands::cmd_gen_phantoms(&GenArgs {
            out: resolve_out(c.out),
            spec_file: c.spec,
            seed: c.seed,
            subjects_per_phase: c.subjects_per_phase,
            train_fraction: c.train_fraction,
            overlap: c.overlap,
            label_noise: c.label_noise,
            image_size: c.image_size,
            slices_per_volume: c.slices_per_volume,
        }),
        Command::Train(c) => commands::cmd_train(&TrainArgs {
            model: c.model,
            train_manifest: c.train_manifest,
            eval_manifest: c.eval_manifest,
            out: resolve_out(c.out),
            config: c.config,
            net: c.net,
            desk: c.desk,
            seed: c.seed,
            iterations: c.iterations,
            resume: c.resume,
        }),
        Command::Eval(c) => commands::cmd_eval(&EvalArgs {
            checkpoint: c.checkpoint,
            test_manifest: c.test_manifest,
            out: resolve_out(c.out),
            batch_size: c.batch_size,
        }),
        Command::Compare(c) => commands::cmd_compare(&CompareArgs {
            report_a: c.report_a,
            report_b: c.report_b,
            out: c.out.map(resolve_out),
        }),
        Command::Synthesize(c) => commands::cmd_synthesize(&SynthArgs {
            checkpoint: c.checkpoint,
            volume: c.volume,
            slice: c.slice,
            target_phase: c.target_phase,
            out: resolve_out(c.out),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
