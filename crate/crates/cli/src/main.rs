//! `aquant` command-line entry point.

use std::path::PathBuf;

use anyhow::Result;
use aquant_cli::config::MixedPrecision;
use aquant_cli::format::{flops_table, report_table};
use aquant_cli::*;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "aquant",
    version,
    about = "Codebook quantization pipeline for toy denoising networks"
)]
struct Cli {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `distill.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision teacher.
    TrainTeacher,
    /// Collect Stage-1 calibration inputs from teacher sampling.
    Calibrate,
    /// Record teacher sampling trajectories for distillation.
    GenTrajectories,
    /// Stage 1: layer-wise codebook calibration.
    Quantize {
        /// `greedy` or `uniform:<M>`.
        #[arg(long)]
        mixed_precision: Option<MixedPrecision>,
    },
    /// Stage 2: distil the quantized model against the teacher.
    Distill,
    /// Draw samples from a checkpoint or quantized model directory.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Second model sampled from the same noise for per-sample MSE.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs of standard versus lookup-table convolution.
    Flops {
        #[arg(long)]
        model: PathBuf,
    },
    /// Bits, objectives, teacher agreement and FLOPs of models.
    Report { models: Vec<PathBuf> },
}

fn print_path(format: Format, key: &str, p: &std::path::Path) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::json!({ key: p })),
        Format::Table => println!("{}", p.display()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let env_seed = std::env::var("AQUANT_SEED").ok();
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref(), env_seed.as_deref(), &cli.sets)?;
    match cli.cmd {
        Cmd::TrainTeacher => print_path(cli.format, "teacher", &cmd_train_teacher(&cfg)?),
        Cmd::Calibrate => print_path(cli.format, "calib", &cmd_calibrate(&cfg)?),
        Cmd::GenTrajectories => {
            print_path(cli.format, "trajectories", &cmd_gen_trajectories(&cfg)?)
        }
        Cmd::Quantize { mixed_precision } => {
            if let Some(m) = mixed_precision {
                cfg.stage1.mixed_precision = m;
            }
            print_path(cli.format, "quantized", &cmd_quantize(&cfg)?)
        }
        Cmd::Distill => print_path(cli.format, "student", &cmd_distill(&cfg)?),
        Cmd::Sample {
            model,
            reference,
            out,
        } => print_path(
            cli.format,
            "samples",
            &cmd_sample(&cfg, &model, reference.as_deref(), out.as_deref())?,
        ),
        Cmd::Flops { model } => {
            let f = cmd_flops(&model)?;
            match cli.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&f)?),
                Format::Table => print!("{}", flops_table(&f)),
            }
            Ok(())
        }
        Cmd::Report { models } => {
            let r = cmd_report(&cfg, &models)?;
            match cli.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&r)?),
                Format::Table => print!("{}", report_table(&r)),
            }
            Ok(())
        }
    }
}
