use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "idattn", version, about = "Multi-instance glyph editing with instance-disentangled attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model, or LoRA adapters on top of a base checkpoint.
    Train(TrainArgs),
    /// Apply every instruction of a file in one sampling run.
    Edit(EditArgs),
    /// Edit and score a test split.
    Eval(EvalArgs),
    /// Write both attention masks and the token layout of an instruction file.
    DumpMasks(DumpMasksArgs),
    /// Rate players from pairwise judgments.
    Elo(EloArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = idattn::synth::dataset::DEFAULT_TRAIN)]
    pub n_train: usize,
    #[arg(long, default_value_t = idattn::synth::dataset::DEFAULT_TEST)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the configured maximum number of boxes per sample.
    #[arg(long)]
    pub max_boxes: Option<usize>,
    /// Run configuration; its `synth` section sets image and box parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (with a `train/` directory) or a split directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train only low-rank adapters on the frozen `--base` model.
    #[arg(long, requires = "base")]
    pub lora: bool,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Continue from a checkpoint saved by an earlier run.
    #[arg(long, conflicts_with_all = ["lora", "base"])]
    pub resume: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Fold adapters into the base weights before the final save.
    #[arg(long, requires = "lora")]
    pub merge: bool,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference image; defaults to the instruction file's `image`.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub instructions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    /// `default`, `all-dis`, `all-har`, `unmasked` or `early-mid-late` such as `dis-har-dis`.
    #[arg(long, default_value = "default")]
    pub schedule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Not needed with `--use-targets`.
    #[arg(long, required_unless_present = "use_targets")]
    pub ckpt: Option<PathBuf>,
    /// Test split directory or dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value = "default")]
    pub schedule: String,
    /// Score every schedule assignment of the layer-scheduling ablation.
    #[arg(long, conflicts_with = "use_targets")]
    pub all_schedules: bool,
    /// Score the ground-truth targets instead of model edits.
    #[arg(long)]
    pub use_targets: bool,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct DumpMasksArgs {
    #[arg(long)]
    pub instructions: PathBuf,
    /// Run configuration supplying the model and prompt geometry.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args)]
pub struct EloArgs {
    /// JSON lines of `{"a": .., "b": .., "result": "a" | "b" | "draw"}`.
    #[arg(long)]
    pub judgments: PathBuf,
    #[arg(long, default_value_t = 32.0)]
    pub k: f64,
    #[arg(long, default_value_t = 1200.0)]
    pub init: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Edit(a) => commands::edit(a),
        Command::Eval(a) => commands::eval(a),
        Command::DumpMasks(a) => commands::dump_masks(a),
        Command::Elo(a) => commands::elo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<idattn::Error>())
                .map_or("other", |ie| ie.kind());
            let line = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
