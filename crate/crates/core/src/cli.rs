//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::complexity::{macs_sweep, model_macs, sweep_table, TABLE_RATIOS};
use crate::cut_loss::HeadReduction;
use crate::diagnostics::{diagnose, export_image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::token_idle::{KeepSchedule, Mode, DEFAULT_NUM_STAGES};
use crate::train::{evaluate, gen_synthetic_dataset, grad_check, train, SyntheticDataset, TrainConfig};
use crate::vit::{ModelParams, ViTConfig};

#[derive(Parser, Debug)]
#[command(name = "tokidle", version, about = "Vision transformer with token idling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    DeitSmall,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalMode {
    Inference,
    Finetune,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a default training config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune; writes a checkpoint and metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and loss terms of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        keep_ratio: f64,
        #[arg(long, value_enum, default_value = "inference")]
        mode: EvalMode,
    },
    /// Multiply-accumulate count of the model.
    CountMacs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "table")]
        keep_ratio: Option<f64>,
        /// Print the sweep over the standard keep ratios.
        #[arg(long)]
        table: bool,
    },
    /// Compare backprop against finite differences on the full objective.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Smoothness and re-selection diagnostics against the hard-prune baseline.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        keep_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heat maps and selection masks for one image.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file holding one image, or a stack of images.
        #[arg(long)]
        image: PathBuf,
        /// Which image of a stack to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        keep_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable output") + "\n"
}

/// A full training config, or a bare architecture.
fn load_vit_config(path: &Path) -> Result<ViTConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(tc) = serde_json::from_str::<TrainConfig>(&text) {
        tc.vit.validate()?;
        return Ok(tc.vit);
    }
    let vit: ViTConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    vit.validate()?;
    Ok(vit)
}

fn load_image(path: &Path, index: usize, config: &ViTConfig) -> Result<Tensor> {
    let t = Tensor::read(path)?;
    let s = config.image_size;
    let c = config.channels_in;
    let image_dims = [s, s, c];
    match t.dims() {
        d if d == image_dims => Ok(t),
        [n, rest @ ..] if rest == image_dims => {
            if index >= *n {
                return Err(Error::contract(format!("image index {index} outside a stack of {n}")));
            }
            let len = s * s * c;
            Tensor::new(image_dims.to_vec(), t.data()[index * len..(index + 1) * len].to_vec())
        }
        d => Err(Error::shape(format!("image tensor {d:?} does not match the model input {image_dims:?}"))),
    }
}

fn schedule_for(config: &ViTConfig, keep_ratio: f64) -> Result<KeepSchedule> {
    KeepSchedule::new(keep_ratio, config.num_layers, DEFAULT_NUM_STAGES)
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::InitConfig { out, preset } => {
            let vit = match preset {
                Preset::Toy => ViTConfig::toy(),
                Preset::DeitSmall => ViTConfig::deit_small(),
            };
            TrainConfig { vit, ..TrainConfig::default() }.save(&out)
        }
        Command::GenData { config, seed, count, out } => {
            let vit = load_vit_config(&config)?;
            gen_synthetic_dataset(seed, count, vit.num_classes, &vit)?.save(&out)
        }
        Command::Train { config, out } => {
            let tc = TrainConfig::load(&config)?;
            let outcome = train(&tc)?;
            outcome.write(&out, &tc.vit)?;
            tc.save(&out.join("config.json"))?;
            let last = outcome.metrics.last().map(to_json).unwrap_or_default();
            emit(stdout, &last)
        }
        Command::Eval { checkpoint, data, keep_ratio, mode } => {
            let (vit, params) = ModelParams::load_checkpoint(&checkpoint)?;
            let data = SyntheticDataset::load(&data, vit.num_classes)?;
            let mode = match mode {
                EvalMode::Inference => Mode::Inference,
                EvalMode::Finetune => Mode::Finetune,
            };
            let schedule = schedule_for(&vit, keep_ratio)?;
            let report = evaluate(&params, &vit, &data, &schedule, mode, HeadReduction::Mean)?;
            emit(stdout, &to_json(&report))
        }
        Command::CountMacs { config, keep_ratio, table } => {
            let vit = load_vit_config(&config)?;
            if table {
                let rows = macs_sweep(&vit, &TABLE_RATIOS, DEFAULT_NUM_STAGES)?;
                emit(stdout, &sweep_table(&rows))
            } else {
                let k = keep_ratio.expect("clap enforces keep-ratio without --table");
                let report = model_macs(&vit, &schedule_for(&vit, k)?)?;
                emit(stdout, &(report.to_json() + "\n"))
            }
        }
        Command::GradCheck { config, seed } => {
            let tc = TrainConfig::load(&config)?;
            let report = grad_check(&tc, seed)?;
            emit(stdout, &to_json(&report))?;
            if report.passed() {
                Ok(())
            } else {
                Err(Error::numeric(format!(
                    "max relative gradient error {:e} at {}[{}]",
                    report.max_rel_error, report.worst_param, report.worst_index
                )))
            }
        }
        Command::Diagnose { checkpoint, data, keep_ratio, out } => {
            let (vit, params) = ModelParams::load_checkpoint(&checkpoint)?;
            let data = SyntheticDataset::load(&data, vit.num_classes)?;
            let report = diagnose(&params, &vit, &data, &schedule_for(&vit, keep_ratio)?)?;
            report.write(&out)?;
            emit(stdout, &to_json(&report.reselection))
        }
        Command::Export { checkpoint, image, index, keep_ratio, out } => {
            let (vit, params) = ModelParams::load_checkpoint(&checkpoint)?;
            let img = load_image(&image, index, &vit)?;
            let paths = export_image(&params, &vit, &img, &schedule_for(&vit, keep_ratio)?, &out)?;
            let names: Vec<String> = paths
                .iter()
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect();
            emit(stdout, &(names.join("\n") + "\n"))
        }
    }
}
