//! The `shadowlab` command line: synthetic data, color-shift negatives,
//! two-stage training, inference, evaluation and numerical diagnostics.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deshadow_core::Error;

pub use commands::{AblationVariant, DatasetManifest, SampleEntry, TrainSummary, VariantResult};

/// Exit status for contract, configuration and usage errors.
pub const EXIT_CONTRACT: i32 = 1;
/// Exit status for file-system and decoding errors.
pub const EXIT_IO: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "shadowlab", version, about = "Shadow removal experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded synthetic shadow samples to a directory.
    Synth(SynthArgs),
    /// Build the color-shift negative set of an image and mask.
    Colorshift(ColorshiftArgs),
    /// Two-stage training, optionally over several gate variants.
    Train(TrainArgs),
    /// Restore an image with a trained checkpoint.
    Infer(InferArgs),
    /// Compare a prediction with the clean image; prints a JSON report.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Measure scan throughput over sequence lengths; CSV output.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image side; a multiple of 4, at least 16.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ColorshiftArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON model and training configuration; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `1`, `2` (needs --resume) or `all`.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Stage-1 checkpoint to continue from when --stage 2.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config seed (initialization, data and negatives).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variants: baseline, gh, gv, full, no-offset.
    #[arg(long)]
    ablate: Option<String>,
    /// Overrides the contrastive weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    /// Directory written by `synth`; otherwise samples are generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of generated training samples.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Side of generated samples.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Seed of the held-out evaluation sample; defaults to seed + 2^32.
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse prediction and per-direction gate maps here.
    #[arg(long)]
    dump_gates: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the reports as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "16,64,256,1024,4096")]
    lengths: String,
    #[arg(long, default_value_t = 4)]
    z: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_CONTRACT
    }
}

/// Parses `argv` (program name first) and runs the subcommand; returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONTRACT } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a.n, a.seed, a.size, &a.out),
        Command::Colorshift(a) => commands::colorshift(&a.image, &a.mask, a.k, a.seed, &a.out),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a.checkpoint, &a.image, &a.mask, &a.out, a.dump_gates.as_deref()),
        Command::Eval(a) => commands::eval(&a.pred, &a.target, &a.mask, a.out.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.json),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
