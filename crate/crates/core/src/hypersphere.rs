//! Hyperspherical embedding module: an optional MLP transform followed by
//! p-norm normalization onto the unit sphere.
//!
//! For `p = 2` the backward rule is the closed form
//!
//! ```text
//! ∂L/∂f = (g - f̂ ⟨g, f̂⟩) / ‖f‖₂,   g = ∂L/∂f̂
//! ```
//!
//! which is the projection of `g` onto the tangent plane of the sphere at
//! `f̂`, scaled by `1/‖f‖₂`. Two consequences are checked throughout the test
//! suite: the gradient is orthogonal to `f`, so a plain SGD step can only
//! grow `‖f‖₂`; and the gradient magnitude is inversely proportional to
//! `‖f‖₂`.
//!
//! `p = 1` and `p = 3` are differentiated through the generic tape rules of
//! the norm formula `(Σ|v|ᵖ)^(1/p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::{Binding, ModelParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_EPS_GUARD: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn default_eps_guard() -> f64 {
    DEFAULT_EPS_GUARD
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypersphereConfig {
    /// Linear layers before normalization: 0, 1 or 2.
    pub mlp_layers: usize,
    /// Batch norm followed by ReLU after every MLP layer.
    #[serde(default)]
    pub use_relu_bn: bool,
    /// Norm used by the normalization layer: 1, 2 or 3.
    pub norm_p: u8,
    /// When false the module is the MLP alone (the "transformed" embedding).
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_eps_guard")]
    pub eps_guard: f64,
}

impl HypersphereConfig {
    /// One linear layer and l2 normalization.
    pub fn standard(dim: usize) -> Self {
        Self {
            mlp_layers: 1,
            use_relu_bn: false,
            norm_p: 2,
            normalize: true,
            input_dim: dim,
            output_dim: dim,
            eps_guard: DEFAULT_EPS_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_layers > 2 {
            return Err(Error::Config(format!("mlp_layers must be 0, 1 or 2, got {}", self.mlp_layers)));
        }
        if !(1..=3).contains(&self.norm_p) {
            return Err(Error::Config(format!("norm_p must be 1, 2 or 3, got {}", self.norm_p)));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("hypersphere dimensions must be >= 1".into()));
        }
        if self.mlp_layers == 0 && self.input_dim != self.output_dim {
            return Err(Error::Config(
                "without MLP layers input_dim must equal output_dim".into(),
            ));
        }
        if !(self.eps_guard > 0.0) {
            return Err(Error::Config("eps_guard must be > 0".into()));
        }
        Ok(())
    }

    /// `(name prefix, fan_in, fan_out)` for each MLP layer.
    pub fn layer_dims(&self) -> Vec<(String, usize, usize)> {
        (0..self.mlp_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.input_dim } else { self.output_dim };
                (format!("hyper.fc{}", i + 1), fan_in, self.output_dim)
            })
            .collect()
    }
}

/// Embeddings before and after normalization, with the per-row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub pre_norm: Tensor,
    pub post_norm: Tensor,
    /// `‖f‖ₚ` for the configured `p` (l2 when normalization is off).
    pub norms: Tensor,
}

/// `‖v‖ₚ = (Σ|vⱼ|ᵖ)^(1/p)`.
pub fn p_norm(v: &[f64], p: u8) -> f64 {
    match p {
        1 => v.iter().map(|x| x.abs()).sum(),
        2 => kernels::dot(v, v).sqrt(),
        _ => v
            .iter()
            .map(|x| x.abs().powi(p as i32))
            .sum::<f64>()
            .powf(1.0 / p as f64),
    }
}

fn as_rows(f: &Tensor) -> Result<()> {
    if f.rank() != 2 {
        return Err(Error::Domain(format!("expected a [b,d] batch, got {:?}", f.shape())));
    }
    Ok(())
}

/// Divides every row by its p-norm. Rows at or below `eps_guard` are an error.
pub fn normalize(f: &Tensor, p: u8, eps_guard: f64) -> Result<Tensor> {
    as_rows(f)?;
    let mut out = Vec::with_capacity(f.numel());
    for (i, row) in f.iter_rows().enumerate() {
        let n = p_norm(row, p);
        if n <= eps_guard || !n.is_finite() {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        out.extend(row.iter().map(|v| v / n));
    }
    Ok(Tensor::from_parts(f.shape().to_vec(), out))
}

/// `(g - f̂⟨g, f̂⟩) / ‖f‖` for one row, given `f̂` and `‖f‖`.
pub(crate) fn tangent_gradient(fhat: &[f64], g: &[f64], norm: f64) -> Vec<f64> {
    let radial = kernels::dot(g, fhat);
    g.iter()
        .zip(fhat)
        .map(|(gv, fv)| (gv - fv * radial) / norm)
        .collect()
}

/// Closed-form gradient of l2 normalization: maps `∂L/∂f̂` to `∂L/∂f` row by
/// row.
pub fn normalize_backward_l2(f: &Tensor, upstream: &Tensor, eps_guard: f64) -> Result<Tensor> {
    as_rows(f)?;
    if f.shape() != upstream.shape() {
        return Err(Error::shape("normalize_backward_l2", f.shape(), upstream.shape()));
    }
    let mut out = Vec::with_capacity(f.numel());
    for (i, (row, g)) in f.iter_rows().zip(upstream.iter_rows()).enumerate() {
        let n = kernels::dot(row, row).sqrt();
        if n <= eps_guard || !n.is_finite() {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        let fhat: Vec<f64> = row.iter().map(|v| v / n).collect();
        out.extend(tangent_gradient(&fhat, g, n));
    }
    Ok(Tensor::from_parts(f.shape().to_vec(), out))
}

/// Normalization built from generic primitives: `|x|ᵖ`, row sums, the
/// `1/p` power, and row division. Works for any `p` and serves as the
/// independent route against the closed-form l2 rule.
pub fn normalize_generic(tape: &mut Tape, x: NodeId, p: u8, eps_guard: f64) -> Result<NodeId> {
    let powered = tape.pow_abs(x, p as f64)?;
    let sums = tape.row_sum(powered)?;
    let norms = tape.pow_abs(sums, 1.0 / p as f64)?;
    if let Some((row, &n)) = tape
        .value(norms)
        .data()
        .iter()
        .enumerate()
        .find(|(_, &n)| n <= eps_guard)
    {
        return Err(Error::DegenerateEmbedding { row, norm: n });
    }
    tape.div_rows(x, norms)
}

/// Normalization as installed in the model: closed-form rule for `p = 2`,
/// generic composition otherwise.
pub fn normalize_on_tape(tape: &mut Tape, x: NodeId, p: u8, eps_guard: f64) -> Result<NodeId> {
    if p == 2 {
        tape.normalize_l2(x, eps_guard)
    } else {
        normalize_generic(tape, x, p, eps_guard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running averages are updated by the caller.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tape nodes produced by the module.
#[derive(Debug, Clone)]
pub struct HyperNodes {
    pub pre_norm: NodeId,
    pub post_norm: NodeId,
    pub bn_stats: Vec<BnStats>,
}

/// Records the module on `tape` for a `[b, input_dim]` batch.
pub fn hyper_forward_on_tape(
    tape: &mut Tape,
    x: NodeId,
    binding: &Binding,
    params: &ModelParams,
    cfg: &HypersphereConfig,
    mode: Mode,
) -> Result<HyperNodes> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::shape("hyper_forward", &shape, &[shape[0], cfg.input_dim]));
    }
    let mut h = x;
    let mut bn_stats = Vec::new();
    for (prefix, _, _) in cfg.layer_dims() {
        let w = binding.get(&format!("{prefix}.weight"))?;
        let b = binding.get(&format!("{prefix}.bias"))?;
        h = tape.matmul(h, w)?;
        h = tape.add_row_bias(h, b)?;
        if cfg.use_relu_bn {
            let gamma = binding.get(&format!("{prefix}.bn_gamma"))?;
            let beta = binding.get(&format!("{prefix}.bn_beta"))?;
            h = match mode {
                Mode::Train => {
                    let out = tape.batch_norm(h, gamma, beta, BN_EPS)?;
                    bn_stats.push(BnStats { layer: prefix.clone(), mean: out.mean, var: out.var });
                    out.node
                }
                Mode::Eval => {
                    // y = γ (x - μ) / σ + β  =  x · (γ/σ) + (β - γμ/σ)
                    let mean = params.buffer(&format!("{prefix}.bn_running_mean"))?;
                    let var = params.buffer(&format!("{prefix}.bn_running_var"))?;
                    let g = tape.value(gamma).data().to_vec();
                    let bt = tape.value(beta).data().to_vec();
                    let gain: Vec<f64> = g
                        .iter()
                        .zip(var.data())
                        .map(|(g, v)| g / (v + BN_EPS).sqrt())
                        .collect();
                    let shift: Vec<f64> = bt
                        .iter()
                        .zip(mean.data())
                        .zip(&gain)
                        .map(|((b, m), k)| b - k * m)
                        .collect();
                    let gain = tape.leaf(Tensor::vector(gain)?);
                    let shift = tape.leaf(Tensor::vector(shift)?);
                    let scaled = tape.scale_columns(h, gain)?;
                    tape.add_row_bias(scaled, shift)?
                }
            };
            h = tape.relu(h)?;
        }
    }
    let post = if cfg.normalize {
        normalize_on_tape(tape, h, cfg.norm_p, cfg.eps_guard)?
    } else {
        h
    };
    Ok(HyperNodes { pre_norm: h, post_norm: post, bn_stats })
}

/// Evaluation-mode forward pass of the module on a `[b, input_dim]` batch.
pub fn hyper_forward(
    embedding: &Tensor,
    params: &ModelParams,
    cfg: &HypersphereConfig,
) -> Result<EmbeddingBatch> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let x = tape.leaf(embedding.clone());
    let nodes = hyper_forward_on_tape(&mut tape, x, &binding, params, cfg, Mode::Eval)?;
    Ok(embedding_batch(&tape, nodes.pre_norm, nodes.post_norm, cfg))
}

pub(crate) fn embedding_batch(
    tape: &Tape,
    pre: NodeId,
    post: NodeId,
    cfg: &HypersphereConfig,
) -> EmbeddingBatch {
    let pre_norm = tape.value(pre).clone();
    let p = if cfg.normalize { cfg.norm_p } else { 2 };
    let norms = pre_norm.iter_rows().map(|r| p_norm(r, p)).collect();
    EmbeddingBatch {
        norms: Tensor::from_parts(vec![pre_norm.rows()], norms),
        post_norm: tape.value(post).clone(),
        pre_norm,
    }
}

/// Updates running batch-norm statistics: `running ← m·running + (1-m)·batch`.
pub fn update_running_stats(params: &mut ModelParams, stats: &[BnStats]) -> Result<()> {
    for s in stats {
        for (suffix, batch) in [("bn_running_mean", &s.mean), ("bn_running_var", &s.var)] {
            let buf = params.buffer_mut(&format!("{}.{suffix}", s.layer))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
    Ok(())
}

/// Plain SGD on a single embedding under an upstream gradient supplied per
/// step: `f ← f - η ∂L/∂f` with `∂L/∂f` from the closed-form rule. Returns
/// `‖f‖₂` before the first step and after every step.
///
/// `upstream` receives the current `f̂` and step index and returns `∂L/∂f̂`.
pub fn sgd_norm_trace<G>(f0: &Tensor, mut upstream: G, lr: f64, steps: usize) -> Result<Vec<f64>>
where
    G: FnMut(&Tensor, usize) -> Tensor,
{
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be > 0, got {lr}")));
    }
    let d = f0.numel();
    let mut f = f0.reshape(&[1, d])?;
    let mut norms = Vec::with_capacity(steps + 1);
    norms.push(f.norm_l2());
    for t in 0..steps {
        let fhat = normalize(&f, 2, DEFAULT_EPS_GUARD)?;
        let g = upstream(&fhat.reshape(&[d])?, t).reshape(&[1, d])?;
        let grad = normalize_backward_l2(&f, &g, DEFAULT_EPS_GUARD)?;
        for (v, gv) in f.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * gv;
        }
        norms.push(f.norm_l2());
    }
    Ok(norms)
}

/// The update scale seen by a normalized embedding, `η / ‖f‖₂`.
pub fn effective_learning_rate(lr: f64, pre_norm: f64) -> f64 {
    lr / pre_norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        let out = normalize(&row(&[3.0, 4.0]), 2, 1e-12).unwrap();
        assert!(close(out.data(), &[0.6, 0.8], 1e-15));
        let unit = row(&[0.0, 1.0, 0.0]);
        assert_eq!(normalize(&unit, 2, 1e-12).unwrap(), unit);
        let out = normalize(&row(&[1.0, -3.0]), 1, 1e-12).unwrap();
        assert!(close(out.data(), &[0.25, -0.75], 1e-15));
    }

    #[test]
    fn degenerate_row_is_reported_with_its_index() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        match normalize(&f, 2, 1e-12) {
            Err(Error::DegenerateEmbedding { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate embedding, got {other:?}"),
        }
        assert!(normalize_backward_l2(&f, &f, 1e-12).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = normalize_backward_l2(&row(&[3.0, 4.0]), &row(&[1.0, 0.0]), 1e-12).unwrap();
        assert!(close(g.data(), &[0.128, -0.096], 1e-15), "{g:?}");

        let f = row(&[0.3, -1.2, 2.0]);
        let fhat = normalize(&f, 2, 1e-12).unwrap();
        let g = normalize_backward_l2(&f, &fhat, 1e-12).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-16));

        let g = normalize_backward_l2(&row(&[0.0, 2.0]), &row(&[1.0, 1.0]), 1e-12).unwrap();
        assert!(close(g.data(), &[0.5, 0.0], 1e-15));
    }

    #[test]
    fn norm_trace_examples() {
        let zero = |_: &Tensor, _| Tensor::zeros(&[2]);
        let trace = sgd_norm_trace(&Tensor::vector(vec![3.0, 4.0]).unwrap(), zero, 0.5, 5).unwrap();
        assert!(trace.iter().all(|&n| n == 5.0));

        let fixed = |_: &Tensor, _| Tensor::vector(vec![1.0, 0.0]).unwrap();
        let trace = sgd_norm_trace(&Tensor::vector(vec![3.0, 4.0]).unwrap(), fixed, 1.0, 1).unwrap();
        assert!((trace[1] * trace[1] - 25.0256).abs() < 1e-12, "{}", trace[1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = HypersphereConfig::standard(8);
        assert!(cfg.validate().is_ok());
        cfg.norm_p = 4;
        assert!(cfg.validate().is_err());
        cfg.norm_p = 2;
        cfg.mlp_layers = 3;
        assert!(cfg.validate().is_err());
        cfg.mlp_layers = 0;
        cfg.input_dim = 4;
        assert!(cfg.validate().is_err());
    }
}
