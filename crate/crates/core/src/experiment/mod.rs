//! Experiment harness: configuration, the training loop, and the studies
//! (learning-rate sweep, ablation, multi-task comparison, diagnostics) that
//! the command-line tool exposes.

mod config;
mod studies;
mod train;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub use config::{ArchSection, DataSection, ExperimentConfig, OutputSection, Strategy, Task, TrainSection};
pub use studies::{
    ablate, ablation_config, ablation_csv, compare_multitask, default_interp_mode, diagnose, interpolate,
    multitask_csv, s_vs_m, sweep_csv, sweep_lr, write_bundle, write_interpolation, AblationRow, BundleMeta,
    DiagnosticBundle, InterpRequest, Interpolation, MultitaskRow, Outcome, RunSummary, SweepRow,
    ABLATION_VARIANTS, MULTITASK_METHODS,
};
pub use train::{evaluate, load_data, run_id, train, Evaluation, MetricsRecord, RunResult, CHAMFER_SCALE};

use crate::datasynth::Dataset;
use crate::error::Result;
use crate::netblocks::save_checkpoint;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.hckp";

/// Trains and writes `metrics.jsonl` (streamed, one record per line) and
/// `model.hckp` into `dir`. On failure the metrics written so far, including
/// the error record, stay on disk.
pub fn train_to_dir(cfg: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    let result = train(cfg, data, &mut |r| {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        Ok(())
    });
    out.flush()?;
    let run = result?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &run.model, &run.params)?;
    Ok(run)
}
