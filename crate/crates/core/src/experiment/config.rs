use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasynth::DatasetConfig;
use crate::error::{Error, Result};
use crate::hypersphere::{HypersphereConfig, DEFAULT_EPS_GUARD};
use crate::netblocks::ModelConfig;
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Completion,
    Classification,
    Both,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Completion => "completion",
            Task::Classification => "classification",
            Task::Both => "both",
        }
    }
}

/// How the two task losses are combined in joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Equal,
    Pcgrad,
    Uncertainty,
    /// `train.weights`, completion first.
    Fixed,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Equal => "equal",
            Strategy::Pcgrad => "pcgrad",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `train.hpcd` and `test.hpcd`. When absent the
    /// dataset is generated in memory from `synthetic`.
    pub path: Option<PathBuf>,
    pub synthetic: DatasetConfig,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

/// Architecture knobs; the enabled heads follow from `train.task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub embed_dim: usize,
    pub encoder_hidden: [usize; 2],
    pub decoder_hidden: [usize; 2],
    pub classifier_hidden: usize,
    pub grid_side: usize,
    pub num_classes: usize,
    pub hyper: bool,
    pub mlp_layers: usize,
    pub use_relu_bn: bool,
    pub norm_p: u8,
    pub normalize: bool,
    pub eps_guard: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        let m = ModelConfig::completion(true);
        Self {
            embed_dim: m.embed_dim,
            encoder_hidden: m.encoder_hidden,
            decoder_hidden: m.decoder_hidden,
            classifier_hidden: m.classifier_hidden,
            grid_side: m.grid_side,
            num_classes: m.num_classes,
            hyper: true,
            mlp_layers: 1,
            use_relu_bn: false,
            norm_p: 2,
            normalize: true,
            eps_guard: DEFAULT_EPS_GUARD,
        }
    }
}

impl ArchSection {
    pub fn model_config(&self, task: Task) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            classifier_hidden: self.classifier_hidden,
            grid_side: self.grid_side,
            num_classes: self.num_classes,
            hyper: self.hyper,
            hypersphere: HypersphereConfig {
                mlp_layers: self.mlp_layers,
                use_relu_bn: self.use_relu_bn,
                norm_p: self.norm_p,
                normalize: self.normalize,
                input_dim: self.embed_dim,
                output_dim: self.embed_dim,
                eps_guard: self.eps_guard,
            },
            completion: task != Task::Classification,
            classification: task != Task::Completion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: Task,
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the held-out split every `eval_every` epochs (and always
    /// after the last one).
    pub eval_every: usize,
    pub histogram_bins: usize,
    /// Adds wall-clock times to the metrics, which makes them non-reproducible.
    pub log_timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            task: Task::Completion,
            strategy: Strategy::Equal,
            weights: vec![1.0, 1.0],
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            eval_every: 1,
            histogram_bins: 32,
            log_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

/// A complete experiment definition. Every section and key is optional;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ArchSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses TOML, applies `key.path=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config(self.train.task)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", t.lr)));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.eval_every == 0 || t.histogram_bins == 0 {
            return Err(Error::Config(
                "train.epochs, batch_size, eval_every and histogram_bins must be >= 1".into(),
            ));
        }
        if t.task == Task::Both {
            if t.weights.len() != 2 {
                return Err(Error::Config(format!("train.weights needs 2 entries, got {}", t.weights.len())));
            }
            crate::multitask::combine_weighted(&[0.0, 0.0], &t.weights)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.data.path.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.data.train_limit == Some(0) || self.data.test_limit == Some(0) {
            return Err(Error::Config("data limits must be >= 1".into()));
        }
        self.model_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }
}

/// `a.b.c=value`: the value is read as a TOML literal when it parses as one,
/// otherwise as a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key in {spec:?}")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
