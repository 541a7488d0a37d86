use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gated_vpt_cli::*;

#[derive(Parser)]
#[command(name = "gvpt", version, about = "Gated prompt tuning for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed (and generate.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tuning parameters and write checkpoint plus metrics.
    Train(Common),
    /// Evaluate a checkpoint on the configured datasets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output.dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Selection ratios, bar chart and attention maps of a gated checkpoint.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset whose first image is used for attention maps.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Blocks to export attention maps for; all by default.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
    },
    /// Finite-difference check of every trainable coordinate.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Train the ablation grid from the [compare] section.
    Compare(Common),
    /// Generate the synthetic dataset from the [generate] section.
    GenData(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply_overrides(c.seed, c.out.clone());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&load(&c)?),
        Command::Eval { common, checkpoint } => cmd_eval(&load(&common)?, checkpoint.as_deref()),
        Command::Analyze {
            checkpoint,
            out,
            data,
            blocks,
        } => cmd_analyze(&AnalyzeOptions {
            checkpoint: &checkpoint,
            out: &out,
            data: data.as_deref(),
            blocks,
        }),
        Command::Gradcheck { common, tolerance } => cmd_gradcheck(&load(&common)?, tolerance),
        Command::Compare(c) => cmd_compare(&load(&c)?),
        Command::GenData(c) => cmd_gen_data(&load(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
