use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Strategy, Task, TrainSection};
use crate::datasynth::{generate_dataset, read_dataset_dir, Dataset, Sample};
use crate::diagnostics::{gradient_conflict, pairwise_cosine_stats, GradientConflict};
use crate::error::{Error, Result};
use crate::hypersphere::{effective_learning_rate, update_running_stats, Mode};
use crate::losses::chamfer;
use crate::multitask::{pcgrad, TaskGradients, UncertaintyState};
use crate::netblocks::{forward_on_tape, pipeline_forward_batch, Binding, ModelConfig, ModelParams};
use crate::optim::{NamedTensors, OptimizerState};
use crate::tape::{GradientMap, Tape};
use crate::tensor::Tensor;

/// Reported Chamfer values are also given multiplied by this factor.
pub const CHAMFER_SCALE: f64 = 1e4;

/// Loads the configured dataset and applies the sample limits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = match &cfg.data.path {
        Some(p) => read_dataset_dir(p)?,
        None => generate_dataset(&cfg.data.synthetic)?,
    };
    if let Some(n) = cfg.data.train_limit {
        ds.train.truncate(n);
    }
    if let Some(n) = cfg.data.test_limit {
        ds.test.truncate(n);
    }
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::Config("dataset needs at least one train and one test sample".into()));
    }
    Ok(ds)
}

/// One line of the metrics stream. Epoch 0 describes the initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean training objective over the epoch (as combined by the strategy).
    pub train_loss: f64,
    pub completion_loss: Option<f64>,
    pub classification_loss: Option<f64>,
    pub eval_chamfer: Option<f64>,
    pub eval_chamfer_x1e4: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Mean l2 norm of pre-normalization test embeddings.
    pub mean_embedding_norm: Option<f64>,
    /// `lr / mean_embedding_norm`, when the decoders see normalized embeddings.
    pub effective_lr: Option<f64>,
    pub cosine_mean: Option<f64>,
    pub cosine_std: Option<f64>,
    /// Shared-parameter gradient cosine between the tasks, averaged over the epoch.
    pub grad_cosine: Option<f64>,
    pub grad_mag_completion: Option<f64>,
    pub grad_mag_classification: Option<f64>,
    pub wall_clock_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Held-out evaluation of one model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean per-sample Chamfer distance.
    pub chamfer: Option<f64>,
    pub accuracy: Option<f64>,
    /// Mean cross-entropy of the classification head.
    pub cross_entropy: Option<f64>,
    pub pre_norm: Tensor,
    /// The embedding the decoders consume.
    pub embedding: Tensor,
    pub class_ids: Vec<u32>,
}

impl Evaluation {
    pub fn mean_pre_norm(&self) -> f64 {
        let n = self.pre_norm.rows() as f64;
        self.pre_norm.iter_rows().map(|r| crate::tensor::kernels::dot(r, r).sqrt()).sum::<f64>() / n
    }
}

/// Evaluation-mode forward pass over `samples` in batches.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Evaluation> {
    let mut cd_sum = 0.0;
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let mut pre = Vec::new();
    let mut emb = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let clouds: Vec<Tensor> = chunk.iter().map(|s| s.partial.clone()).collect();
        let out = pipeline_forward_batch(&clouds, params, model)?;
        pre.extend_from_slice(out.embedding.pre_norm.data());
        emb.extend_from_slice(out.embedding.post_norm.data());
        if let Some(c) = &out.completion {
            let m = model.grid_points();
            for (i, s) in chunk.iter().enumerate() {
                cd_sum += chamfer(&c.slice_rows(i * m, (i + 1) * m)?, &s.complete)?;
            }
        }
        if let Some(l) = &out.logits {
            for (row, s) in l.iter_rows().zip(chunk) {
                if argmax(row) == s.class_id as usize {
                    correct += 1;
                }
                ce_sum += crate::losses::cross_entropy(row, s.class_id as usize)?;
            }
        }
    }
    let n = samples.len();
    let d = model.embed_dim;
    Ok(Evaluation {
        chamfer: model.completion.then(|| cd_sum / n as f64),
        accuracy: model.classification.then(|| correct as f64 / n as f64),
        cross_entropy: model.classification.then(|| ce_sum / n as f64),
        pre_norm: Tensor::new(vec![n, d], pre)?,
        embedding: Tensor::new(vec![n, d], emb)?,
        class_ids: samples.iter().map(|s| s.class_id).collect(),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Result of a finished training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub records: Vec<MetricsRecord>,
    pub eval: Evaluation,
    /// Mean over all steps of the shared-gradient cosine (joint runs only).
    pub mean_grad_cosine: Option<f64>,
    pub log_vars: Option<Vec<f64>>,
}

impl RunResult {
    pub fn final_chamfer(&self) -> Option<f64> {
        self.eval.chamfer
    }
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    let mut id = format!("{}-hyper_{}", t.task.as_str(), if cfg.model.hyper { "on" } else { "off" });
    if t.task == Task::Both {
        id.push('-');
        id.push_str(t.strategy.as_str());
    }
    format!("{id}-{}-lr{}-seed{}", t.optimizer, t.lr, t.seed)
}

/// Shared parameters are the ones both task losses reach.
fn is_shared(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("hyper.")
}

fn collect_grads(gm: &GradientMap, binding: &Binding, params: &ModelParams) -> NamedTensors {
    binding
        .iter()
        .map(|(name, id)| {
            let g = gm.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(params.params[name].shape()));
            (name.clone(), g)
        })
        .collect()
}

fn flatten_shared(g: &NamedTensors) -> Vec<f64> {
    g.iter()
        .filter(|(n, _)| is_shared(n))
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect()
}

fn axpy_into(out: &mut NamedTensors, coef: f64, g: &NamedTensors) {
    for (name, t) in g {
        let o = out.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        for (a, b) in o.data_mut().iter_mut().zip(t.data()) {
            *a += coef * b;
        }
    }
}

#[derive(Debug, Default)]
struct StepStats {
    objective: f64,
    completion: Option<f64>,
    classification: Option<f64>,
    conflict: Option<GradientConflict>,
}

/// Mutable state of one training run.
struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    pub model: ModelConfig,
    pub params: ModelParams,
    opt: OptimizerState,
    uncertainty: Option<(NamedTensors, OptimizerState)>,
    shuffle_rng: ChaCha8Rng,
    surgery_rng: ChaCha8Rng,
    pub steps: usize,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config();
        let t = &cfg.train;
        let params = ModelParams::init(&model, t.seed)?;
        let uncertainty = (t.task == Task::Both && t.strategy == Strategy::Uncertainty)
            .then(|| -> Result<_> {
                let vars = (0..2)
                    .map(|i| (UncertaintyState::param_name(i), Tensor::scalar(0.0)))
                    .collect();
                Ok((vars, OptimizerState::new(t.optimizer, t.lr)?))
            })
            .transpose()?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(t.seed);
            r.set_stream(s);
            r
        };
        Ok(Self {
            cfg,
            model,
            params,
            opt: OptimizerState::new(t.optimizer, t.lr)?,
            uncertainty,
            shuffle_rng: stream(1),
            surgery_rng: stream(2),
            steps: 0,
        })
    }

    fn log_vars(&self) -> Option<Vec<f64>> {
        self.uncertainty.as_ref().map(|(v, _)| v.values().map(Tensor::item).collect())
    }

    fn step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        let b = batch.len();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &self.params);
        let points = stack(batch.iter().map(|s| &s.partial))?;
        let x = tape.leaf(points);
        let nodes = forward_on_tape(&mut tape, &binding, &self.params, &self.model, x, b, Mode::Train)?;
        let comp = match nodes.completion {
            Some(c) => {
                let target = tape.leaf(stack(batch.iter().map(|s| &s.complete))?);
                Some(tape.chamfer(c, target, b)?)
            }
            None => None,
        };
        let cls = match nodes.logits {
            Some(l) => {
                let labels: Vec<usize> = batch.iter().map(|s| s.class_id as usize).collect();
                Some(tape.softmax_cross_entropy(l, &labels)?)
            }
            None => None,
        };
        let mut stats = StepStats {
            completion: comp.map(|n| tape.value(n).item()),
            classification: cls.map(|n| tape.value(n).item()),
            ..Default::default()
        };

        let grads = match (comp, cls) {
            (Some(loss), None) | (None, Some(loss)) => {
                stats.objective = tape.value(loss).item();
                collect_grads(&tape.backward(loss)?, &binding, &self.params)
            }
            (Some(c), Some(k)) => {
                let gc = collect_grads(&tape.backward(c)?, &binding, &self.params);
                let gk = collect_grads(&tape.backward(k)?, &binding, &self.params);
                let (vc, vk) = (flatten_shared(&gc), flatten_shared(&gk));
                stats.conflict = gradient_conflict(&vc, &vk).ok();
                let losses = [stats.completion.unwrap_or(0.0), stats.classification.unwrap_or(0.0)];
                self.combine(gc, gk, vc, vk, losses, &mut stats)?
            }
            (None, None) => return Err(Error::Contract("no task head enabled".into())),
        };
        if !stats.objective.is_finite() {
            return Err(Error::NonFinite(format!("training objective {}", stats.objective)));
        }
        self.opt.step(&mut self.params.params, &grads)?;
        update_running_stats(&mut self.params, &nodes.bn_stats)?;
        Ok(stats)
    }

    fn combine(
        &mut self,
        gc: NamedTensors,
        gk: NamedTensors,
        vc: Vec<f64>,
        vk: Vec<f64>,
        losses: [f64; 2],
        stats: &mut StepStats,
    ) -> Result<NamedTensors> {
        let t = &self.cfg.train;
        let mut total = NamedTensors::new();
        match t.strategy {
            Strategy::Equal | Strategy::Fixed => {
                let w = if t.strategy == Strategy::Equal { [1.0, 1.0] } else { [t.weights[0], t.weights[1]] };
                stats.objective = crate::multitask::combine_weighted(&losses, &w)?;
                axpy_into(&mut total, w[0], &gc);
                axpy_into(&mut total, w[1], &gk);
            }
            Strategy::Uncertainty => {
                let (vars, opt) = self.uncertainty.as_mut().expect("uncertainty state");
                let s: Vec<f64> = vars.values().map(Tensor::item).collect();
                let state = UncertaintyState { log_vars: s.clone() };
                stats.objective = crate::multitask::uncertainty_combine(&losses, &state)?;
                let prec: Vec<f64> = s.iter().map(|v| (-v).exp()).collect();
                axpy_into(&mut total, prec[0], &gc);
                axpy_into(&mut total, prec[1], &gk);
                // d/ds (e^{-s} L + s) = 1 - e^{-s} L
                let g: NamedTensors = (0..2)
                    .map(|i| (UncertaintyState::param_name(i), Tensor::scalar(1.0 - prec[i] * losses[i])))
                    .collect();
                opt.step(vars, &g)?;
            }
            Strategy::Pcgrad => {
                stats.objective = losses[0] + losses[1];
                let tg = TaskGradients::new(vec!["completion".into(), "classification".into()], vec![vc, vk])?;
                let merged = pcgrad(&tg, &mut self.surgery_rng)?.summed();
                axpy_into(&mut total, 1.0, &gc);
                axpy_into(&mut total, 1.0, &gk);
                let mut offset = 0;
                for (_, g) in total.iter_mut().filter(|(n, _)| is_shared(n)) {
                    let n = g.numel();
                    g.data_mut().copy_from_slice(&merged[offset..offset + n]);
                    offset += n;
                }
            }
        }
        Ok(total)
    }
}

fn stack<'s>(clouds: impl Iterator<Item = &'s Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for c in clouds {
        rows += c.rows();
        data.extend_from_slice(c.data());
    }
    Tensor::new(vec![rows, 3], data)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains per `cfg` on `data`, passing every metrics record to `sink`.
///
/// A failing step (non-finite value, degenerate embedding) stops the run: an
/// error record naming the step is sent to `sink` and the error is returned.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunResult> {
    let start = Instant::now();
    let mut tr = Trainer::new(cfg)?;
    let t = &cfg.train;
    let id = run_id(cfg);
    let clock = |start: &Instant| t.log_timing.then(|| start.elapsed().as_millis() as u64);
    let mut records = Vec::new();
    let blank = |epoch: usize, step: usize| MetricsRecord {
        run_id: id.clone(),
        epoch,
        step,
        train_loss: 0.0,
        completion_loss: None,
        classification_loss: None,
        eval_chamfer: None,
        eval_chamfer_x1e4: None,
        eval_accuracy: None,
        mean_embedding_norm: None,
        effective_lr: None,
        cosine_mean: None,
        cosine_std: None,
        grad_cosine: None,
        grad_mag_completion: None,
        grad_mag_classification: None,
        wall_clock_ms: None,
        error: None,
    };

    let mut eval = evaluate(&tr.model, &tr.params, &data.test, t.batch_size)?;
    let mut rec = blank(0, 0);
    let initial = evaluate(&tr.model, &tr.params, &data.train, t.batch_size)?;
    let (c0, k0) = (initial.chamfer, initial.cross_entropy);
    rec.completion_loss = c0;
    rec.classification_loss = k0;
    rec.train_loss = c0.unwrap_or(0.0) + k0.unwrap_or(0.0);
    fill_eval(&mut rec, &eval, &tr.model, t)?;
    rec.wall_clock_ms = clock(&start);
    sink(&rec)?;
    records.push(rec);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut all_cos = Vec::new();
    for epoch in 1..=t.epochs {
        order.shuffle(&mut tr.shuffle_rng);
        let (mut obj, mut lc, mut lk) = (Vec::new(), Vec::new(), Vec::new());
        let (mut cos, mut m1, mut m2) = (Vec::new(), Vec::new(), Vec::new());
        for idx in order.chunks(t.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let stats = match tr.step(&batch) {
                Ok(s) => s,
                Err(e) => {
                    let mut r = blank(epoch, tr.steps);
                    r.train_loss = f64::NAN;
                    r.error = Some(e.to_string());
                    r.wall_clock_ms = clock(&start);
                    // The record is best effort; the training error is what matters.
                    let _ = sink(&r);
                    return Err(Error::Training { epoch, step: tr.steps, source: Box::new(e) });
                }
            };
            tr.steps += 1;
            obj.push(stats.objective);
            lc.extend(stats.completion);
            lk.extend(stats.classification);
            if let Some(c) = stats.conflict {
                cos.push(c.cosine);
                m1.push(c.mag1);
                m2.push(c.mag2);
            }
        }
        all_cos.extend_from_slice(&cos);
        let mut rec = blank(epoch, tr.steps);
        rec.train_loss = mean(&obj).unwrap_or(0.0);
        rec.completion_loss = mean(&lc);
        rec.classification_loss = mean(&lk);
        rec.grad_cosine = mean(&cos);
        rec.grad_mag_completion = mean(&m1);
        rec.grad_mag_classification = mean(&m2);
        if epoch % t.eval_every == 0 || epoch == t.epochs {
            eval = evaluate(&tr.model, &tr.params, &data.test, t.batch_size)
                .map_err(|e| Error::Training { epoch, step: tr.steps, source: Box::new(e) })?;
            fill_eval(&mut rec, &eval, &tr.model, t)?;
        }
        rec.wall_clock_ms = clock(&start);
        sink(&rec)?;
        records.push(rec);
    }
    log::info!("{id}: {} steps, final eval chamfer {:?}", tr.steps, eval.chamfer);
    let log_vars = tr.log_vars();
    Ok(RunResult {
        run_id: id,
        model: tr.model,
        params: tr.params,
        records,
        eval,
        mean_grad_cosine: mean(&all_cos),
        log_vars,
    })
}

fn fill_eval(rec: &mut MetricsRecord, e: &Evaluation, model: &ModelConfig, t: &TrainSection) -> Result<()> {
    rec.eval_chamfer = e.chamfer;
    rec.eval_chamfer_x1e4 = e.chamfer.map(|c| c * CHAMFER_SCALE);
    rec.eval_accuracy = e.accuracy;
    let norm = e.mean_pre_norm();
    rec.mean_embedding_norm = Some(norm);
    if model.hyper && model.hypersphere.normalize {
        rec.effective_lr = Some(effective_learning_rate(t.lr, norm));
    }
    // A zero embedding has no direction; leave the cosine fields empty.
    if let Ok(s) = pairwise_cosine_stats(&e.embedding, None, t.histogram_bins) {
        rec.cosine_mean = Some(s.overall.summary.mean);
        rec.cosine_std = Some(s.overall.summary.std);
    }
    Ok(())
}
