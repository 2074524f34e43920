//! Encoder/decoder pipeline `yᵢ = Dᵢ(E(x))`: a PointNet-style encoder with a
//! shared per-point MLP and max pooling, an optional hypersphere module, a
//! one-stage folding decoder for completion, and a classification head.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::{
    embedding_batch, hyper_forward_on_tape, BnStats, EmbeddingBatch, HypersphereConfig, Mode,
};
use crate::optim::NamedTensors;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Coordinates allowed after unit-sphere normalization.
pub const COORD_LIMIT: f64 = 1.5;

/// An `[n,3]` point set with an optional class id.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Tensor,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Tensor, label: Option<usize>) -> Result<Self> {
        if points.rank() != 2 || points.cols() != 3 {
            return Err(Error::Domain(format!(
                "point cloud must be [n,3], got {:?}",
                points.shape()
            )));
        }
        if points.rows() == 0 {
            return Err(Error::Domain("point cloud needs at least one point".into()));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.numel() == 0
    }

    /// True when every coordinate lies within `[-1.5, 1.5]`.
    pub fn is_normalized(&self) -> bool {
        self.points.data().iter().all(|v| v.abs() <= COORD_LIMIT)
    }
}

fn default_embed_dim() -> usize {
    128
}
fn default_encoder_hidden() -> [usize; 2] {
    [64, 128]
}
fn default_decoder_hidden() -> [usize; 2] {
    [128, 64]
}
fn default_classifier_hidden() -> usize {
    64
}
fn default_grid_side() -> usize {
    16
}
fn default_num_classes() -> usize {
    4
}

/// Architecture of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: [usize; 2],
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: [usize; 2],
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: usize,
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Whether the hypersphere module sits between encoder and decoders.
    pub hyper: bool,
    pub hypersphere: HypersphereConfig,
    pub completion: bool,
    pub classification: bool,
}

impl ModelConfig {
    /// Default widths with the completion head only.
    pub fn completion(hyper: bool) -> Self {
        Self {
            embed_dim: default_embed_dim(),
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
            classifier_hidden: default_classifier_hidden(),
            grid_side: default_grid_side(),
            num_classes: default_num_classes(),
            hyper,
            hypersphere: HypersphereConfig::standard(default_embed_dim()),
            completion: true,
            classification: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.encoder_hidden.contains(&0)
            || self.decoder_hidden.contains(&0)
            || self.classifier_hidden == 0
        {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if self.grid_side == 0 {
            return Err(Error::Config("grid_side must be >= 1".into()));
        }
        if self.classification && self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !self.completion && !self.classification {
            return Err(Error::Config("at least one decoder must be enabled".into()));
        }
        if self.hyper {
            self.hypersphere.validate()?;
            if self.hypersphere.input_dim != self.embed_dim
                || self.hypersphere.output_dim != self.embed_dim
            {
                return Err(Error::Config(format!(
                    "hypersphere dims ({}, {}) must equal embed_dim {}",
                    self.hypersphere.input_dim, self.hypersphere.output_dim, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    pub fn grid_points(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Name of the last linear layer whose output is the (pre-normalization)
    /// embedding: the final hypersphere MLP layer when present, otherwise the
    /// encoder's last layer.
    pub fn embedding_layer(&self) -> String {
        if self.hyper && self.hypersphere.mlp_layers > 0 {
            format!("hyper.fc{}.weight", self.hypersphere.mlp_layers)
        } else {
            "encoder.fc3.weight".into()
        }
    }

    /// Every trainable parameter of the active architecture, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let d = self.embed_dim;
        let [e1, e2] = self.encoder_hidden;
        linear_specs(&mut specs, "encoder", &[3, e1, e2, d]);
        if self.hyper {
            for (prefix, fan_in, fan_out) in self.hypersphere.layer_dims() {
                specs.push(ParamSpec::weight(format!("{prefix}.weight"), fan_in, fan_out));
                specs.push(ParamSpec::new(format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
                if self.hypersphere.use_relu_bn {
                    specs.push(ParamSpec::new(format!("{prefix}.bn_gamma"), vec![fan_out], Init::Ones));
                    specs.push(ParamSpec::new(format!("{prefix}.bn_beta"), vec![fan_out], Init::Zeros));
                }
            }
        }
        if self.completion {
            let [k1, k2] = self.decoder_hidden;
            linear_specs(&mut specs, "decoder", &[d + 2, k1, k2, 3]);
        }
        if self.classification {
            linear_specs(&mut specs, "classifier", &[d, self.classifier_hidden, self.num_classes]);
        }
        specs
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffer_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if self.hyper && self.hypersphere.use_relu_bn {
            for (prefix, _, fan_out) in self.hypersphere.layer_dims() {
                specs.push(ParamSpec::new(format!("{prefix}.bn_running_mean"), vec![fan_out], Init::Zeros));
                specs.push(ParamSpec::new(format!("{prefix}.bn_running_var"), vec![fan_out], Init::Ones));
            }
        }
        specs
    }

    /// Closed-form trainable parameter count. With `d` the embedding width,
    /// encoder widths `e1, e2`, decoder widths `k1, k2`, classifier width `h`
    /// and `c` classes:
    ///
    /// ```text
    /// encoder     4·e1 + (e1+1)·e2 + (e2+1)·d
    /// hyper       Σ layers (in+1)·d, plus 2·d per layer with batch norm
    /// decoder     (d+3)·k1 + (k1+1)·k2 + (k2+1)·3
    /// classifier  (d+1)·h + (h+1)·c
    /// ```
    ///
    /// The default completion model (128/64/128, decoder 128/64) has 25 088
    /// encoder and 25 219 decoder parameters; the standard hypersphere module
    /// adds 16 512.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let [e1, e2] = self.encoder_hidden;
        let mut total = 4 * e1 + (e1 + 1) * e2 + (e2 + 1) * d;
        if self.hyper {
            let bn = if self.hypersphere.use_relu_bn { 2 * d } else { 0 };
            for (_, fan_in, _) in self.hypersphere.layer_dims() {
                total += (fan_in + 1) * d + bn;
            }
        }
        if self.completion {
            let [k1, k2] = self.decoder_hidden;
            total += (d + 3) * k1 + (k1 + 1) * k2 + (k2 + 1) * 3;
        }
        if self.classification {
            let (h, c) = (self.classifier_hidden, self.num_classes);
            total += (d + 1) * h + (h + 1) * c;
        }
        total
    }
}

fn linear_specs(specs: &mut Vec<ParamSpec>, block: &str, widths: &[usize]) {
    for (i, pair) in widths.windows(2).enumerate() {
        let prefix = format!("{block}.fc{}", i + 1);
        specs.push(ParamSpec::weight(format!("{prefix}.weight"), pair[0], pair[1]));
        specs.push(ParamSpec::new(format!("{prefix}.bias"), vec![pair[1]], Init::Zeros));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-uniform over fan-in: `U(-√(6/fan_in), √(6/fan_in))`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    fn weight(name: String, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, vec![fan_in, fan_out], Init::KaimingUniform { fan_in })
    }
}

/// Named parameter tensors plus non-trainable buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub params: NamedTensors,
    pub buffers: NamedTensors,
}

impl ModelParams {
    /// Seeded initialization for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NamedTensors::new();
        for spec in cfg.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        let mut buffers = NamedTensors::new();
        for spec in cfg.buffer_specs() {
            let value = if spec.init == Init::Ones { 1.0 } else { 0.0 };
            buffers.insert(spec.name, Tensor::full(&spec.shape, value));
        }
        Ok(Self { params, buffers })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks that every name of the architecture exists with its declared shape.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for spec in cfg.param_specs() {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("model parameter", &spec.shape, t.shape()));
            }
        }
        for spec in cfg.buffer_specs() {
            let t = self.buffer(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("model buffer", &spec.shape, t.shape()));
            }
        }
        Ok(())
    }
}

/// Parameters recorded as leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::bind_named(tape, &params.params)
    }

    pub fn bind_named(tape: &mut Tape, tensors: &NamedTensors) -> Self {
        let ids = tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        Self { ids }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

fn linear(tape: &mut Tape, binding: &Binding, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = binding.get(&format!("{prefix}.weight"))?;
    let b = binding.get(&format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row_bias(h, b)
}

/// Shared per-point MLP (ReLU between layers) and max pooling over each of
/// `groups` consecutive blocks of points. `points: [groups·n, 3]` → `[groups, d]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    points: NodeId,
    groups: usize,
) -> Result<NodeId> {
    if tape.value(points).rows() == 0 || groups == 0 {
        return Err(Error::Domain("empty point cloud".into()));
    }
    let mut h = linear(tape, binding, points, "encoder.fc1")?;
    h = tape.relu(h)?;
    h = linear(tape, binding, h, "encoder.fc2")?;
    h = tape.relu(h)?;
    h = linear(tape, binding, h, "encoder.fc3")?;
    tape.max_pool_groups(h, groups)
}

/// Unconstrained embedding `E(x)` of one `[n,3]` cloud.
pub fn encode(points: &Tensor, params: &ModelParams) -> Result<Tensor> {
    if points.rank() != 2 || points.cols() != 3 {
        return Err(Error::Domain(format!("expected [n,3] points, got {:?}", points.shape())));
    }
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let x = tape.leaf(points.clone());
    let e = encode_on_tape(&mut tape, &binding, x, 1)?;
    let d = tape.value(e).cols();
    tape.value(e).reshape(&[d])
}

/// Uniform `side × side` lattice over `[-0.5, 0.5]²`, row-major.
pub fn fold_grid(side: usize) -> Tensor {
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -0.5 + i as f64 / (side - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(side * side * 2);
    for i in 0..side {
        for j in 0..side {
            data.push(coord(i));
            data.push(coord(j));
        }
    }
    Tensor::from_parts(vec![side * side, 2], data)
}

/// Folding decoder on a `[b,d]` batch of embeddings: each embedding is
/// concatenated with every grid coordinate and passed through the shared
/// MLP `(d+2) → k1 → k2 → 3`. Returns `[b·m, 3]`, embedding-major.
///
/// The first layer is evaluated as `e·W_e + g·W_g + b`, which equals the
/// matmul of the concatenated `[e, g]` rows without materializing them.
pub fn decode_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    emb: NodeId,
    grid: &Tensor,
) -> Result<NodeId> {
    let d = tape.value(emb).cols();
    let w1 = binding.get("decoder.fc1.weight")?;
    let rows = tape.value(w1).rows();
    if rows != d + 2 {
        return Err(Error::shape("fold_decode", &[d + 2], tape.shape(w1)));
    }
    let w_emb = tape.slice_rows(w1, 0, d)?;
    let w_grid = tape.slice_rows(w1, d, d + 2)?;
    let b1 = binding.get("decoder.fc1.bias")?;
    let grid = tape.leaf(grid.clone());
    let from_grid = tape.matmul(grid, w_grid)?;
    let from_grid = tape.add_row_bias(from_grid, b1)?;
    let from_emb = tape.matmul(emb, w_emb)?;
    let mut h = tape.tile_add(from_grid, from_emb)?;
    h = tape.relu(h)?;
    h = linear(tape, binding, h, "decoder.fc2")?;
    h = tape.relu(h)?;
    linear(tape, binding, h, "decoder.fc3")
}

/// Decodes one embedding into `grid_side²` points.
pub fn fold_decode(embedding: &Tensor, params: &ModelParams, grid_side: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let d = embedding.numel();
    let e = tape.leaf(embedding.reshape(&[1, d])?);
    let out = decode_on_tape(&mut tape, &binding, e, &fold_grid(grid_side))?;
    Ok(tape.value(out).clone())
}

/// Two linear layers `d → h → c` with ReLU between; raw logits.
pub fn classify_on_tape(tape: &mut Tape, binding: &Binding, emb: NodeId) -> Result<NodeId> {
    let h = linear(tape, binding, emb, "classifier.fc1")?;
    let h = tape.relu(h)?;
    linear(tape, binding, h, "classifier.fc2")
}

pub fn classify(embedding: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let d = embedding.numel();
    let e = tape.leaf(embedding.reshape(&[1, d])?);
    let logits = classify_on_tape(&mut tape, &binding, e)?;
    let c = tape.value(logits).cols();
    tape.value(logits).reshape(&[c])
}

/// Node ids of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Encoder output `[b,d]`.
    pub raw: NodeId,
    /// Value entering the normalization layer (`raw` when the module is off).
    pub pre_norm: NodeId,
    /// Embedding consumed by every decoder.
    pub embedding: NodeId,
    pub completion: Option<NodeId>,
    pub logits: Option<NodeId>,
    pub bn_stats: Vec<BnStats>,
}

/// Records the full pipeline for `batch` clouds stacked in `points`.
pub fn forward_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    params: &ModelParams,
    cfg: &ModelConfig,
    points: NodeId,
    batch: usize,
    mode: Mode,
) -> Result<ForwardNodes> {
    let raw = encode_on_tape(tape, binding, points, batch)?;
    let (pre_norm, embedding, bn_stats) = if cfg.hyper {
        let h = hyper_forward_on_tape(tape, raw, binding, params, &cfg.hypersphere, mode)?;
        (h.pre_norm, h.post_norm, h.bn_stats)
    } else {
        (raw, raw, Vec::new())
    };
    let completion = if cfg.completion {
        Some(decode_on_tape(tape, binding, embedding, &fold_grid(cfg.grid_side))?)
    } else {
        None
    };
    let logits = if cfg.classification {
        Some(classify_on_tape(tape, binding, embedding)?)
    } else {
        None
    };
    Ok(ForwardNodes { raw, pre_norm, embedding, completion, logits, bn_stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub embedding: EmbeddingBatch,
    pub completion: Option<Tensor>,
    pub logits: Option<Tensor>,
}

/// Evaluation-mode pipeline for one cloud.
pub fn pipeline_forward(
    points: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<PipelineOutput> {
    let mut out = pipeline_forward_batch(std::slice::from_ref(points), params, cfg)?;
    Ok(PipelineOutput {
        embedding: out.embedding,
        completion: out.completion.take(),
        logits: out.logits.take().map(|l| {
            let c = l.cols();
            l.reshape(&[c]).expect("single row")
        }),
    })
}

/// Evaluation-mode pipeline for equally sized clouds; outputs are stacked
/// per cloud (`[b·m,3]` completion, `[b,c]` logits).
pub fn pipeline_forward_batch(
    clouds: &[Tensor],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<PipelineOutput> {
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let parts: Vec<NodeId> = clouds.iter().map(|c| tape.leaf(c.clone())).collect();
    let points = tape.concat_rows(&parts)?;
    let nodes = forward_on_tape(&mut tape, &binding, params, cfg, points, clouds.len(), Mode::Eval)?;
    let hcfg = if cfg.hyper {
        cfg.hypersphere.clone()
    } else {
        HypersphereConfig { normalize: false, ..cfg.hypersphere.clone() }
    };
    Ok(PipelineOutput {
        embedding: embedding_batch(&tape, nodes.pre_norm, nodes.embedding, &hcfg),
        completion: nodes.completion.map(|n| tape.value(n).clone()),
        logits: nodes.logits.map(|n| tape.value(n).clone()),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Single-file checkpoint: `HCKP`, u32 version, u64 manifest length, a JSON
/// manifest (model config, names, shapes, payload offsets), then the `HTEN`
/// payloads back to back. All integers little-endian; offsets are relative
/// to the start of the payload section.
pub fn write_checkpoint<W: Write>(w: &mut W, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let all = params
        .params
        .iter()
        .map(|(n, t)| (n, t, false))
        .chain(params.buffers.iter().map(|(n, t)| (n, t, true)));
    for (name, t, buffer) in all {
        let bytes = t.to_hten_bytes();
        tensors.push(TensorEntry {
            name: name.clone(),
            buffer,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            length: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = serde_json::to_vec_pretty(&Manifest { model: cfg.clone(), tensors })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let truncated = || Error::Format("truncated checkpoint".into());
    if bytes.len() < 16 {
        return Err(truncated());
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize.checked_add(mlen).ok_or_else(truncated)?;
    let manifest: Manifest =
        serde_json::from_slice(bytes.get(16..manifest_end).ok_or_else(truncated)?)?;
    let payload = &bytes[manifest_end..];
    let mut params = ModelParams::default();
    for entry in manifest.tensors {
        let start = entry.offset as usize;
        let end = start.checked_add(entry.length as usize).ok_or_else(truncated)?;
        let t = Tensor::from_hten_bytes(payload.get(start..end).ok_or_else(truncated)?)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("shape mismatch for {}", entry.name)));
        }
        let map = if entry.buffer { &mut params.buffers } else { &mut params.params };
        map.insert(entry.name, t);
    }
    manifest.model.validate()?;
    params.check(&manifest.model)?;
    Ok((manifest.model, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, cfg, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut f = fs::File::open(path)?;
    read_checkpoint(&mut f)
}
