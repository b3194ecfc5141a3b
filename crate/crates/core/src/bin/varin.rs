use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varin::editing::LambdaKind;
use varin::harness::config::{EditMode, ExperimentConfig, Overrides};
use varin::harness::{self, EditInputs, Report};
use varin::inversion::InversionKind;
use varin::Result;

/// Inverse-noise extraction and editing on a toy next-scale token model.
#[derive(Parser)]
#[command(name = "varin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the edit seed (and the base of counted sweep seeds).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    start_scale: Option<usize>,
    /// "linear" or a constant in [0, 1].
    #[arg(long)]
    lambda: Option<LambdaKind>,
    /// Output directory; replaces `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a grid, decode it back and report reconstruction metrics.
    Encode {
        #[command(flatten)]
        common: Common,
        /// Grid file; defaults to the config's [input].
        input: Option<PathBuf>,
    },
    /// Extract the inverse noise of a grid's token pyramid.
    Invert {
        #[command(flatten)]
        common: Common,
        input: Option<PathBuf>,
        /// Inversion kind: lai or oai.
        #[arg(long)]
        mode: Option<InversionKind>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        workers: u16,
    },
    /// Edit a grid toward the target label.
    Edit {
        #[command(flatten)]
        common: Common,
        input: Option<PathBuf>,
        /// varin, regen or target-only.
        #[arg(long)]
        mode: Option<EditMode>,
        /// Noise file from `invert`.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Invert in memory when no noise file is given.
        #[arg(long)]
        auto_invert: bool,
        /// ASCII mask ('#' = edit region) for background metrics.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run the config's [sweep] over values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<EditMode>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        workers: u16,
    },
    /// Render a pyramid (one PGM per scale) or grid (one per channel).
    Render {
        file: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the bundled demo scenes, masks and configs.
    Demo {
        #[arg(long, default_value = "varin-demo")]
        out: PathBuf,
    },
}

fn load(common: &Common, mode: Option<EditMode>, kind: Option<InversionKind>) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        seed: common.seed,
        mode,
        kind,
        tau: common.tau,
        start_scale: common.start_scale,
        lambda: common.lambda,
        out: common.out.clone(),
    };
    ExperimentConfig::load(&common.config, &overrides)
}

fn run(cli: Cli) -> Result<Report> {
    match cli.command {
        Command::Encode { common, input } => harness::cmd_encode(&load(&common, None, None)?, input.as_deref()),
        Command::Invert {
            common,
            input,
            mode,
            workers,
        } => harness::cmd_invert(&load(&common, None, mode)?, input.as_deref(), workers as usize),
        Command::Edit {
            common,
            input,
            mode,
            noise,
            auto_invert,
            mask,
        } => {
            let inputs = EditInputs {
                input: input.as_deref(),
                noise: noise.as_deref(),
                mask: mask.as_deref(),
                auto_invert,
            };
            harness::cmd_edit(&load(&common, mode, None)?, inputs)
        }
        Command::Sweep { common, mode, workers } => harness::cmd_sweep(&load(&common, mode, None)?, workers as usize),
        Command::Render { file, out } => harness::cmd_render(&file, &out),
        Command::Demo { out } => harness::cmd_demo(&out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            for note in &report.notes {
                println!("{note}");
            }
            for file in &report.files {
                println!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("varin: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
