use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dswinir_core::checkpoint::Checkpoint;
use dswinir_core::io::{export_offset_heatmap, Image, RunConfig};
use dswinir_core::model::{Model, STAGES};
use dswinir_core::oracle::OracleReport;
use dswinir_core::rng::{stream, stream_rng};
use dswinir_core::train::{ablation_matrix, run_ablation, train_loop, Dataset, TrainConfig};
use dswinir_core::{set_finite_checks, suite, Error, Tensor};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dswinir", version, about = "Deformable sliding-window image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of clean PPM/PGM images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count, MACs and forward wall time on a square input.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        hw: usize,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Central-difference gradient checks of every differentiable op.
    Gradcheck {
        /// Only ops whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Optimized kernels against their brute-force oracles.
    Oracle {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Export a per-pixel offset-length heatmap with a JSON sidecar.
    Offsets {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Stage index, 0 = first encoder stage.
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation variant and report held-out PSNR.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Base run config; defaults to the tiny model with the desk recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

/// A finished command's outcome when it is not plain success.
struct Failure {
    code: u8,
    message: String,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parameter(_)) => 2,
        Some(Error::Data(_) | Error::Io(_) | Error::Format { .. } | Error::Checkpoint { .. } | Error::Shape(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        Some(Error::Check(_)) => 5,
        Some(Error::Tape(_) | Error::Optimizer(_)) | None => 1,
    }
}

/// Print one NDJSON line; a closed pipe ends the process quietly.
fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{text}").and_then(|_| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn emit(v: serde_json::Value) {
    line(&v.to_string());
}

fn emit_record(r: &impl Serialize) {
    line(&serde_json::to_string(r).expect("records serialize"));
}

fn emit_reports(reports: &[OracleReport]) -> anyhow::Result<()> {
    reports.iter().for_each(emit_record);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.kernel.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("{} of {} checks failed: {}", failed.len(), reports.len(), failed.join(", "))).into())
    }
}

fn load_model(ckpt: &Path) -> anyhow::Result<Model<f32>> {
    let (model, _) = Checkpoint::<f32>::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?.into_model()?;
    Ok(model)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, data, out, seed } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let trainer = train_loop(&run.model, &run.train, &data, emit_record)?;
            trainer.checkpoint().save(&out)?;
            emit(json!({"checkpoint": out, "steps": trainer.steps_done(), "params": trainer.model.params.num_scalars()}));
        }
        Command::Infer { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let img = Image::load(&input)?;
            if img.channels != model.config.image_channels {
                return Err(Error::Data(format!("image has {} channels, model expects {}", img.channels, model.config.image_channels)).into());
            }
            let start = Instant::now();
            let y = model.infer(&img.to_tensor())?;
            y.check_finite("restored image")?;
            let restored = Image::from_tensor(&y)?;
            restored.save(&out)?;
            emit(json!({"out": out, "width": restored.width, "height": restored.height, "wall_ms": start.elapsed().as_secs_f64() * 1e3}));
        }
        Command::Bench { config, hw, repeat, seed } => {
            if repeat == 0 {
                return Err(Error::Config("--repeat must be positive".into()).into());
            }
            let run = RunConfig::load(&config)?;
            run.model.check_extent(hw, hw)?;
            let model = Model::<f32>::build(&run.model, seed)?;
            let acc = model.count_params_flops(hw, hw)?;
            let c = run.model.image_channels;
            let mut rng = stream_rng(seed, stream::TEST, 0xbe4c);
            let x = Tensor::<f32>::from_fn(&[1, c, hw, hw], |_| rng.random())?;
            set_finite_checks(false);
            let mut times = Vec::with_capacity(repeat);
            for _ in 0..repeat {
                let start = Instant::now();
                std::hint::black_box(model.infer(&x)?);
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            set_finite_checks(true);
            let mean = times.iter().sum::<f64>() / repeat as f64;
            let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
            emit(json!({"hw": hw, "params": acc.params, "macs": acc.macs, "repeat": repeat, "mean_ms": mean, "min_ms": min}));
        }
        Command::Gradcheck { filter } => {
            let reports = suite::gradcheck_suite(filter.as_deref())?;
            if reports.is_empty() {
                return Err(Error::Config(format!("no op matches {:?}; known: {}", filter.unwrap_or_default(), suite::gradcheck_names().join(", "))).into());
            }
            emit_reports(&reports)?;
        }
        Command::Oracle { seeds } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()).into());
            }
            emit_reports(&suite::oracle_suite(seeds)?)?;
        }
        Command::Offsets { ckpt, input, stage, group, out } => {
            if stage >= STAGES {
                return Err(Error::Parameter(format!("stage {stage} out of range 0..{STAGES}")).into());
            }
            let model = load_model(&ckpt)?;
            let img = Image::load(&input)?;
            let summary = export_offset_heatmap(&model, &img, stage, group, &out)?;
            emit_record(&summary);
        }
        Command::Ablate { data, steps, out, seeds, config, variants } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig { train: TrainConfig::desk(), ..RunConfig::default() },
            };
            let train = TrainConfig { total_steps: steps, ..base.train };
            let mut matrix = ablation_matrix(&base.model);
            if !variants.is_empty() {
                if let Some(v) = variants.iter().find(|v| !matrix.iter().any(|m| &m.name == *v)) {
                    let known: Vec<_> = matrix.iter().map(|m| m.name.as_str()).collect();
                    return Err(Error::Config(format!("unknown variant {v}; known: {}", known.join(", "))).into());
                }
                matrix.retain(|m| variants.contains(&m.name));
            }
            let dataset = Dataset::load(&data, train.holdout_images)?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            let report = run_ablation(&matrix, &train, &dataset, &seed_list, emit_record)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(Error::from)?;
            emit(json!({"report": out, "summary": report.summary, "orderings": report.orderings}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).map_err(|e| Failure { code: exit_code(&e), message: format!("{e:#}") }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.message, "exit_code": f.code}));
            ExitCode::from(f.code)
        }
    }
}
