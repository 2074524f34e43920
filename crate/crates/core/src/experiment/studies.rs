use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Strategy, Task};
use super::train::{evaluate, train, RunResult, CHAMFER_SCALE};
use crate::datasynth::{Dataset, Sample};
use crate::diagnostics::{
    interpolate_embeddings, norm_histogram, pairwise_cosine_stats, weight_svd, CosineStats,
    Histogram, InterpMode, SvdSpectrum,
};
use crate::error::{Error, Result};
use crate::multitask::{default_weight_grid, weight_search, EvalPoint};
use crate::netblocks::{fold_decode, ModelConfig, ModelParams};

/// Final held-out numbers of one run inside a study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub chamfer: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_grad_cosine: Option<f64>,
    /// Range of the l2 norms of the embeddings the decoders consumed.
    pub embedding_norm_min: f64,
    pub embedding_norm_max: f64,
}

impl RunSummary {
    pub fn of(r: &RunResult) -> Self {
        let norms: Vec<f64> = r.eval.embedding.iter_rows().map(|x| crate::tensor::kernels::dot(x, x).sqrt()).collect();
        Self {
            run_id: r.run_id.clone(),
            chamfer: r.eval.chamfer,
            accuracy: r.eval.accuracy,
            mean_grad_cosine: r.mean_grad_cosine,
            embedding_norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            embedding_norm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// How a study cell ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Outcome {
    Ok(RunSummary),
    /// Non-finite values or a degenerate embedding.
    Diverged(String),
    Failed(String),
}

impl Outcome {
    fn from_run(r: Result<RunResult>) -> Self {
        match r {
            Ok(run) => {
                let s = RunSummary::of(&run);
                match s.chamfer {
                    Some(c) if !c.is_finite() => Outcome::Diverged(format!("final chamfer {c}")),
                    _ => Outcome::Ok(s),
                }
            }
            Err(e) if e.is_numeric() => Outcome::Diverged(e.to_string()),
            Err(e) => Outcome::Failed(e.to_string()),
        }
    }

    pub fn summary(&self) -> Option<&RunSummary> {
        match self {
            Outcome::Ok(s) => Some(s),
            _ => None,
        }
    }

    pub fn chamfer(&self) -> Option<f64> {
        self.summary().and_then(|s| s.chamfer)
    }

    fn status(&self) -> String {
        match self {
            Outcome::Ok(_) => "ok".into(),
            Outcome::Diverged(m) => format!("diverged: {m}"),
            Outcome::Failed(m) => format!("failed: {m}"),
        }
    }
}

fn run_quiet(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunResult> {
    train(cfg, data, &mut |_| Ok(()))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lr: f64,
    pub hyper: bool,
    pub outcome: Outcome,
}

/// Trains every learning rate with the hypersphere module on and off (same
/// seed). Rows are ordered by learning rate, hyper on before off.
pub fn sweep_lr(base: &ExperimentConfig, lrs: &[f64], data: &Dataset) -> Result<Vec<SweepRow>> {
    let mut unique: Vec<f64> = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("sweep learning rates must be > 0, got {lr}")));
        }
        if unique.contains(&lr) {
            log::warn!("duplicate learning rate {lr} dropped from the sweep");
        } else {
            unique.push(lr);
        }
    }
    let cells: Vec<(f64, bool)> = unique.iter().flat_map(|&lr| [(lr, true), (lr, false)]).collect();
    Ok(cells
        .par_iter()
        .map(|&(lr, hyper)| {
            let mut cfg = base.clone();
            cfg.train.lr = lr;
            cfg.model.hyper = hyper;
            SweepRow { lr, hyper, outcome: Outcome::from_run(run_quiet(&cfg, data)) }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    csv_string(
        &["lr", "variant", "status", "eval_chamfer", "eval_chamfer_x1e4", "eval_accuracy"],
        rows.iter().map(|r| {
            let s = r.outcome.summary();
            vec![
                r.lr.to_string(),
                if r.hyper { "hyper" } else { "base" }.into(),
                r.outcome.status(),
                opt_cell(s.and_then(|s| s.chamfer)),
                opt_cell(s.and_then(|s| s.chamfer).map(|c| c * CHAMFER_SCALE)),
                opt_cell(s.and_then(|s| s.accuracy)),
            ]
        }),
    )
}

/// The seven ablation variants, in table order.
pub const ABLATION_VARIANTS: [&str; 7] = ["base", "mlp1", "mlp2_l2", "mlp1_relu_bn_l2", "mlp1_l1", "mlp1_l2", "mlp1_l3"];

/// Applies an ablation variant to a base configuration.
pub fn ablation_config(base: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let m = &mut cfg.model;
    m.hyper = true;
    m.mlp_layers = 1;
    m.use_relu_bn = false;
    m.normalize = true;
    m.norm_p = 2;
    match variant {
        "base" => m.hyper = false,
        "mlp1" => m.normalize = false,
        "mlp2_l2" => m.mlp_layers = 2,
        "mlp1_relu_bn_l2" => m.use_relu_bn = true,
        "mlp1_l1" => m.norm_p = 1,
        "mlp1_l2" => {}
        "mlp1_l3" => m.norm_p = 3,
        other => return Err(Error::Config(format!("unknown ablation variant {other}"))),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub outcome: Outcome,
}

pub fn ablate(base: &ExperimentConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    if base.train.task == Task::Classification {
        return Err(Error::Config("the ablation needs the completion task".into()));
    }
    let cfgs = ABLATION_VARIANTS
        .iter()
        .map(|v| ablation_config(base, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(ABLATION_VARIANTS
        .par_iter()
        .zip(cfgs.par_iter())
        .map(|(&variant, cfg)| AblationRow { variant, outcome: Outcome::from_run(run_quiet(cfg, data)) })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow], base: &ExperimentConfig) -> String {
    csv_string(
        &["variant", "hyper", "mlp_layers", "relu_bn", "norm", "status", "eval_chamfer", "eval_chamfer_x1e4"],
        rows.iter().map(|r| {
            let m = ablation_config(base, r.variant).expect("known variant").model;
            let c = r.outcome.chamfer();
            vec![
                r.variant.into(),
                m.hyper.to_string(),
                if m.hyper { m.mlp_layers } else { 0 }.to_string(),
                (m.hyper && m.use_relu_bn).to_string(),
                if m.hyper && m.normalize { format!("l{}", m.norm_p) } else { "none".into() },
                r.outcome.status(),
                opt_cell(c),
                opt_cell(c.map(|c| c * CHAMFER_SCALE)),
            ]
        }),
    )
}

/// Percentage change of the best joint-training Chamfer distance relative to
/// single-task completion; positive means joint training helped.
pub fn s_vs_m(cd_single: f64, cd_multi_best: f64) -> f64 {
    100.0 * (cd_single - cd_multi_best) / cd_single
}

/// The six training methods compared per variant, in table order.
pub const MULTITASK_METHODS: [&str; 6] =
    ["single_completion", "single_classification", "equal", "pcgrad", "uncertainty", "weight_search"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultitaskRow {
    pub hyper: bool,
    pub method: &'static str,
    /// Task weights used (the selected ones for weight search).
    pub weights: Option<Vec<f64>>,
    pub outcome: Outcome,
    /// Per variant: best joint Chamfer relative to single-task completion.
    pub s_vs_m: Option<f64>,
}

fn method_config(base: &ExperimentConfig, hyper: bool, method: &str) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.hyper = hyper;
    let t = &mut cfg.train;
    match method {
        "single_completion" => t.task = Task::Completion,
        "single_classification" => t.task = Task::Classification,
        m => {
            t.task = Task::Both;
            t.strategy = match m {
                "equal" => Strategy::Equal,
                "pcgrad" => Strategy::Pcgrad,
                "uncertainty" => Strategy::Uncertainty,
                _ => Strategy::Fixed,
            };
        }
    }
    cfg
}

fn run_method(base: &ExperimentConfig, hyper: bool, method: &'static str, data: &Dataset) -> MultitaskRow {
    let cfg = method_config(base, hyper, method);
    let (weights, outcome) = if method == "weight_search" {
        let search = weight_search(&default_weight_grid(), cfg.train.seed, |w, seed| {
            let mut c = cfg.clone();
            c.train.weights = w.to_vec();
            c.train.seed = seed;
            let r = run_quiet(&c, data)?;
            let chamfer = r.eval.chamfer.expect("completion head");
            Ok(EvalPoint { chamfer, accuracy: r.eval.accuracy })
        });
        match search {
            Ok(s) => {
                let mut c = cfg.clone();
                c.train.weights = s.best.clone();
                (Some(s.best), Outcome::from_run(run_quiet(&c, data)))
            }
            Err(e) => (None, Outcome::Failed(e.to_string())),
        }
    } else {
        let w = match cfg.train.task {
            Task::Both => Some(vec![1.0, 1.0]),
            _ => None,
        };
        (w, Outcome::from_run(run_quiet(&cfg, data)))
    };
    MultitaskRow { hyper, method, weights, outcome, s_vs_m: None }
}

/// Single-task baselines and the four joint strategies, with and without the
/// hypersphere module: 2 × 6 rows.
pub fn compare_multitask(base: &ExperimentConfig, data: &Dataset) -> Result<Vec<MultitaskRow>> {
    base.validate()?;
    let cells: Vec<(bool, &'static str)> = [true, false]
        .iter()
        .flat_map(|&h| MULTITASK_METHODS.iter().map(move |&m| (h, m)))
        .collect();
    let mut rows: Vec<MultitaskRow> = cells.par_iter().map(|&(h, m)| run_method(base, h, m, data)).collect();
    for hyper in [true, false] {
        let single = rows
            .iter()
            .find(|r| r.hyper == hyper && r.method == "single_completion")
            .and_then(|r| r.outcome.chamfer());
        let best_multi = rows
            .iter()
            .filter(|r| r.hyper == hyper && r.weights.is_some())
            .filter_map(|r| r.outcome.chamfer())
            .min_by(f64::total_cmp);
        if let (Some(s), Some(m)) = (single, best_multi) {
            for r in rows.iter_mut().filter(|r| r.hyper == hyper) {
                r.s_vs_m = Some(s_vs_m(s, m));
            }
        }
    }
    Ok(rows)
}

pub fn multitask_csv(rows: &[MultitaskRow]) -> String {
    csv_string(
        &["variant", "method", "weights", "status", "accuracy", "chamfer", "chamfer_x1e4", "s_vs_m"],
        rows.iter().map(|r| {
            let s = r.outcome.summary();
            let c = s.and_then(|s| s.chamfer);
            vec![
                if r.hyper { "hyper" } else { "base" }.into(),
                r.method.into(),
                r.weights
                    .as_ref()
                    .map(|w| w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
                r.outcome.status(),
                opt_cell(s.and_then(|s| s.accuracy)),
                opt_cell(c),
                opt_cell(c.map(|c| c * CHAMFER_SCALE)),
                opt_cell(r.s_vs_m),
            ]
        }),
    )
}

/// Decoded interpolation between two test embeddings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interpolation {
    pub mode: InterpMode,
    pub src_index: usize,
    pub dst_index: usize,
    pub t: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    /// One `[grid_side², 3]` cloud per step, as rows of points.
    pub clouds: Vec<Vec<[f64; 3]>>,
}

/// Default mode: spherical exactly when decoders see l2-normalized embeddings.
pub fn default_interp_mode(model: &ModelConfig) -> InterpMode {
    InterpMode::default_for(model.hyper && model.hypersphere.normalize && model.hypersphere.norm_p == 2)
}

pub fn interpolate(
    model: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    src: usize,
    dst: usize,
    steps: usize,
    mode: Option<InterpMode>,
) -> Result<Interpolation> {
    if !model.completion {
        return Err(Error::Config("interpolation needs the completion decoder".into()));
    }
    let pick = |i: usize| {
        samples
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("sample index {i} out of range ({} samples)", samples.len())))
    };
    let pair = [pick(src)?, pick(dst)?];
    let e = evaluate(model, params, &pair, 2)?;
    let mode = mode.unwrap_or_else(|| default_interp_mode(model));
    let path = interpolate_embeddings(&e.embedding.slice_rows(0, 1)?.reshape(&[model.embed_dim])?,
        &e.embedding.slice_rows(1, 2)?.reshape(&[model.embed_dim])?, steps, mode)?;
    let mut clouds = Vec::with_capacity(steps);
    for emb in &path {
        let c = fold_decode(emb, params, model.grid_side)?;
        clouds.push(c.iter_rows().map(|p| [p[0], p[1], p[2]]).collect());
    }
    Ok(Interpolation {
        mode,
        src_index: src,
        dst_index: dst,
        t: (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect(),
        embeddings: path.iter().map(|t| t.data().to_vec()).collect(),
        clouds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleMeta {
    pub samples: usize,
    pub hyper: bool,
    pub svd_layer: String,
    /// Range of l2 norms of the embeddings after the hypersphere module.
    pub post_norm_min: f64,
    pub post_norm_max: f64,
    pub mean_pre_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticBundle {
    pub meta: BundleMeta,
    pub norm_histogram: Histogram,
    pub cosine: CosineStats,
    pub svd: SvdSpectrum,
    pub interpolation: Option<Interpolation>,
}

/// Interpolation request for [`diagnose`].
#[derive(Debug, Clone, Copy)]
pub struct InterpRequest {
    pub src: usize,
    pub dst: usize,
    pub steps: usize,
    pub mode: Option<InterpMode>,
}

pub fn diagnose(
    model: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    bins: usize,
    interp: Option<InterpRequest>,
) -> Result<DiagnosticBundle> {
    let e = evaluate(model, params, samples, 32)?;
    let layer = model.embedding_layer();
    let norms: Vec<f64> = e.embedding.iter_rows().map(|r| crate::tensor::kernels::dot(r, r).sqrt()).collect();
    let meta = BundleMeta {
        samples: samples.len(),
        hyper: model.hyper,
        svd_layer: layer.clone(),
        post_norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        post_norm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_pre_norm: e.mean_pre_norm(),
    };
    let interpolation = interp
        .map(|r| interpolate(model, params, samples, r.src, r.dst, r.steps, r.mode))
        .transpose()?;
    Ok(DiagnosticBundle {
        meta,
        norm_histogram: norm_histogram(&e.pre_norm, bins)?,
        cosine: pairwise_cosine_stats(&e.embedding, Some(&e.class_ids), bins)?,
        svd: weight_svd(params.get(&layer)?)?,
        interpolation,
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// One JSON document per artifact.
pub fn write_bundle(dir: &Path, b: &DiagnosticBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(dir, "bundle.json", &b.meta)?;
    write_json(dir, "norm_histogram.json", &b.norm_histogram)?;
    write_json(dir, "cosine_stats.json", &b.cosine)?;
    write_json(dir, "svd_spectrum.json", &b.svd)?;
    if let Some(i) = &b.interpolation {
        write_json(dir, "interpolation.json", i)?;
    }
    Ok(())
}

pub fn write_interpolation(dir: &Path, i: &Interpolation) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(dir, "interpolation.json", i)
}
