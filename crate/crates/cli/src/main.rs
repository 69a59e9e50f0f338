//! `nerfvs`: scene generation, scaffold baking, training, rendering and
//! evaluation of scaffold-guided voxel radiance fields.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use nerfvs_core::dataset::Split;
use nerfvs_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nerfvs", version, about = "Scaffold-guided voxel radiance fields for free view synthesis")]
struct Cli {
    /// Worker threads for all parallel stages (default: logical cores).
    #[arg(long, global = true, env = "NERFVS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or corrupt synthetic datasets.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// Bake distance and coverage rasters from a mesh.
    #[command(subcommand)]
    Scaffold(ScaffoldCmd),
    /// Train a voxel grid on a dataset.
    Train(TrainArgs),
    /// Render color images and distance maps from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split, or run the ablation table.
    Eval(EvalArgs),
    /// Run scene generation, baking, training, rendering and evaluation.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
pub enum SceneCmd {
    /// Write a dataset spec template.
    Spec {
        /// Template to start from: desk or l-room.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Image width and height.
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset directory from a spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the scaffold of a dataset and re-bake its priors.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Output dataset directory; may equal --data.
        #[arg(long)]
        out: PathBuf,
        /// vertex-noise, delete-random-faces or offset-object.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        mag: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
pub enum ScaffoldCmd {
    /// Bake per-camera distance and coverage maps as PFM files.
    Bake {
        #[arg(long)]
        mesh: PathBuf,
        /// JSON list of cameras.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Visibility tolerance in scene units.
        #[arg(long, default_value_t = nerfvs_core::scaffold::DEFAULT_EPS)]
        eps: f64,
    },
}

/// Training configuration sources, applied in order: preset, file, --set,
/// --seed.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Starting preset: default, desk or smoke.
    #[arg(long)]
    pub preset: Option<String>,
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    /// Near bound of every ray.
    #[arg(long, default_value_t = 0.05)]
    pub near: f64,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub command: Option<EvalCmd>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "extrap")]
    pub split: Split,
    /// Path of the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub near: f64,
    /// Also write the rendered images to this directory.
    #[arg(long)]
    pub renders: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum EvalCmd {
    /// Train and score the full method and its ablations.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; defaults to `<data>/ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also train the photometric-only baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Views per split written as side-by-side image grids.
    #[arg(long, default_value_t = 4)]
    pub grid_views: usize,
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Dataset spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps library errors to exit codes: 2 usage, 3 data, 4 divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io { .. } | Error::Data(_) | Error::Contract(_) => 3,
        Error::Divergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Scene(cmd) => commands::scene(cmd),
        Command::Scaffold(cmd) => commands::scaffold(cmd),
        Command::Train(args) => commands::train(&args),
        Command::Render(args) => commands::render(&args),
        Command::Eval(args) => commands::eval(args),
        Command::Pipeline(args) => commands::pipeline(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(exit_code(failure.error()))
        }
    }
}
