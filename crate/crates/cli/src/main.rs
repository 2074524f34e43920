use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hyperpc::datasynth::{dataset_stats, generate_dataset, write_dataset_dir, Split};
use hyperpc::diagnostics::InterpMode;
use hyperpc::experiment::{
    ablate, ablation_csv, compare_multitask, diagnose, evaluate, interpolate, load_data, multitask_csv, sweep_csv,
    sweep_lr, train_to_dir, write_bundle, write_interpolation, ExperimentConfig, InterpRequest, CHAMFER_SCALE,
    CHECKPOINT_FILE, METRICS_FILE,
};
use hyperpc::netblocks::load_checkpoint;
use hyperpc::Error;

#[derive(Parser, Debug)]
#[command(name = "hyperpc", version, about = "Hyperspherical point-cloud embedding experiments")]
struct Cli {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, or for generation with `gen-data`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `<out>/train.hpcd` and `<out>/test.hpcd`.
    GenData,
    /// Train one model; writes metrics.jsonl, model.hckp and config.toml.
    Train,
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train hyper-on and hyper-off models for each learning rate.
    SweepLr {
        #[arg(long = "lr", value_delimiter = ',', default_values_t = [1e-3, 1e-2, 1e-1, 1.0])]
        lrs: Vec<f64>,
    },
    /// Train the seven ablation variants.
    Ablate,
    /// Single-task and joint training under each strategy, hyper on and off.
    CompareMultitask,
    /// Norm, cosine and singular-value diagnostics of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        interp: OptionalInterp,
    },
    /// Decode an interpolation between two test samples.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: usize,
        #[arg(long)]
        dst: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Print header and per-class counts of a dataset file or directory.
    DatasetStats { path: PathBuf },
}

#[derive(Args, Debug)]
struct OptionalInterp {
    /// With `--dst`, also decode an interpolation between these test samples.
    #[arg(long, requires = "dst")]
    src: Option<usize>,
    #[arg(long, requires = "src")]
    dst: Option<usize>,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Linear,
    Spherical,
}

impl From<ModeArg> for InterpMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Linear => InterpMode::Linear,
            ModeArg::Spherical => InterpMode::Spherical,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        let key = match cli.command {
            Command::GenData => "data.synthetic.seed",
            _ => "train.seed",
        };
        overrides.push(format!("{key}={seed}"));
    }
    ExperimentConfig::from_toml(&text, &overrides)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match &cli.command {
        Command::GenData => {
            let out = cli.out.clone().or_else(|| cfg.data.path.clone()).unwrap_or_else(|| PathBuf::from("data"));
            let ds = generate_dataset(&cfg.data.synthetic)?;
            write_dataset_dir(&out, &ds)?;
            log::info!("wrote {} train / {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train => {
            let data = load_data(&cfg)?;
            write_text(&out, "config.toml", &cfg.to_toml())?;
            let run = train_to_dir(&cfg, &data, &out)?;
            let c = run.final_chamfer();
            print!(
                "{}",
                pretty(&json!({
                    "run_id": run.run_id,
                    "eval_chamfer": c,
                    "eval_chamfer_x1e4": c.map(|c| c * CHAMFER_SCALE),
                    "eval_accuracy": run.eval.accuracy,
                    "metrics": out.join(METRICS_FILE),
                    "checkpoint": out.join(CHECKPOINT_FILE),
                }))
            );
        }
        Command::Eval { checkpoint, split } => {
            let (model, params) = load_checkpoint(checkpoint)?;
            let data = load_data(&cfg)?;
            let (name, samples) = match split {
                SplitArg::Train => ("train", &data.train),
                SplitArg::Test => ("test", &data.test),
            };
            let e = evaluate(&model, &params, samples, cfg.train.batch_size)?;
            let report = pretty(&json!({
                "split": name,
                "samples": samples.len(),
                "eval_chamfer": e.chamfer,
                "eval_chamfer_x1e4": e.chamfer.map(|c| c * CHAMFER_SCALE),
                "eval_accuracy": e.accuracy,
                "mean_embedding_norm": e.mean_pre_norm(),
            }));
            write_text(&out, "eval.json", &report)?;
            print!("{report}");
        }
        Command::SweepLr { lrs } => {
            let data = load_data(&cfg)?;
            let rows = sweep_lr(&cfg, lrs, &data)?;
            let path = write_text(&out, "sweep_lr.csv", &sweep_csv(&rows))?;
            log::info!("wrote {}", path.display());
        }
        Command::Ablate => {
            let data = load_data(&cfg)?;
            let rows = ablate(&cfg, &data)?;
            let path = write_text(&out, "ablation.csv", &ablation_csv(&rows, &cfg))?;
            log::info!("wrote {}", path.display());
        }
        Command::CompareMultitask => {
            let data = load_data(&cfg)?;
            let rows = compare_multitask(&cfg, &data)?;
            let path = write_text(&out, "multitask.csv", &multitask_csv(&rows))?;
            log::info!("wrote {}", path.display());
        }
        Command::Diagnose { checkpoint, bins, interp } => {
            let (model, params) = load_checkpoint(checkpoint)?;
            let data = load_data(&cfg)?;
            let request = match (interp.src, interp.dst) {
                (Some(src), Some(dst)) => Some(InterpRequest {
                    src,
                    dst,
                    steps: interp.steps,
                    mode: interp.mode.map(Into::into),
                }),
                _ => None,
            };
            let bins = bins.unwrap_or(cfg.train.histogram_bins);
            let bundle = diagnose(&model, &params, &data.test, bins, request)?;
            write_bundle(&out, &bundle)?;
            log::info!("wrote diagnostics to {}", out.display());
        }
        Command::Interpolate { checkpoint, src, dst, steps, mode } => {
            let (model, params) = load_checkpoint(checkpoint)?;
            let data = load_data(&cfg)?;
            let i = interpolate(&model, &params, &data.test, *src, *dst, *steps, mode.map(Into::into))?;
            write_interpolation(&out, &i)?;
            log::info!("wrote {}", out.join("interpolation.json").display());
        }
        Command::DatasetStats { path } => {
            let report = if path.is_dir() {
                json!({
                    "train": dataset_stats(&path.join(Split::Train.file_name()))?,
                    "test": dataset_stats(&path.join(Split::Test.file_name()))?,
                })
            } else {
                serde_json::to_value(dataset_stats(path)?)?
            };
            print!("{}", pretty(&report));
        }
    }
    Ok(())
}
