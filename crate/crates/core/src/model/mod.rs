//! The imputation network: a transformer encoder reading one token per coarse
//! step and emitting `zoom` fine values per token.

pub mod loss;
mod nn;
pub mod train;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kal::KalState;
use crate::series::{CoarseBundle, FineSeries, ValueDomain, WindowExample};
use crate::{Error, Result};

pub use loss::{class_loss_grad, emd, l_combine, l_combine_grad, mse};
pub use train::{fit_plain, fit_targets, Adam, EpochRecord, Objective, TrainConfig, TrainLog};

pub const CHECKPOINT_MAGIC: &str = "FINEGRAIN-CKPT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 3, width: 128, heads: 4, ff_width: 256, dropout: 0.0, seed: 0 }
    }
}

impl ModelConfig {
    /// A compact configuration for tests and quick runs.
    pub fn small(seed: u64) -> Self {
        Self { layers: 2, width: 32, heads: 4, ff_width: 64, dropout: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Shape of the data a model was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub layout: Vec<String>,
    pub target: String,
    pub domain: ValueDomain,
    pub granularity_ms: f64,
    pub context_len: usize,
    pub zoom: usize,
}

/// Per-entry affine input normalization and a target scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Targets are divided by this before the loss; outputs multiplied by it.
    pub target_scale: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let std = (s2 / n - mean * mean).max(0.0).sqrt();
    (mean, if std > 1e-9 { std } else { 1.0 })
}

impl Normalization {
    pub fn fit(train: &[WindowExample]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::Invalid("empty training set".into()))?;
        let n_entries = first.input.entries.len();
        let mut input_mean = Vec::with_capacity(n_entries);
        let mut input_std = Vec::with_capacity(n_entries);
        for e in 0..n_entries {
            let (m, s) = mean_std(train.iter().flat_map(|w| w.input.entries[e].values.iter().copied()));
            input_mean.push(m);
            input_std.push(s);
        }
        let (_, target_scale) = mean_std(train.iter().flat_map(|w| w.target.values.iter().copied()));
        Ok(Self { input_mean, input_std, target_scale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Untrained,
    Plain,
    Kal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub mode: TrainMode,
    pub refined: bool,
    pub epochs: usize,
    pub emd_weight: f64,
    /// Multipliers at the end of constraint-aware training, for resuming.
    #[serde(default)]
    pub kal: Option<KalState>,
}

impl TrainingMeta {
    pub fn trained(&self) -> bool {
        self.mode != TrainMode::Untrained
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub io: IoSpec,
    pub norm: Normalization,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
    net: nn::Net,
}

#[derive(Serialize, Deserialize)]
struct CheckpointData {
    config: ModelConfig,
    io: IoSpec,
    norm: Normalization,
    meta: TrainingMeta,
    params: Vec<f64>,
}

fn build_net(config: &ModelConfig, io: &IoSpec) -> nn::Net {
    nn::Net::new(nn::Shape {
        tokens: io.context_len,
        inputs: io.layout.len(),
        width: config.width,
        heads: config.heads,
        ff: config.ff_width,
        zoom: io.zoom,
        layers: config.layers,
    })
}

impl Model {
    /// Fresh model shaped after `train`, with normalization fitted on it.
    pub fn new(config: ModelConfig, train: &[WindowExample]) -> Result<Self> {
        config.validate()?;
        let first = train.first().ok_or_else(|| Error::Invalid("empty training set".into()))?;
        let io = IoSpec {
            layout: first.input.layout(),
            target: first.target.channel.clone(),
            domain: first.target.domain,
            granularity_ms: first.target.granularity_ms,
            context_len: first.input.context_len,
            zoom: first.input.zoom,
        };
        let norm = Normalization::fit(train)?;
        let net = build_net(&config, &io);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = net.init(&mut rng);
        let meta = TrainingMeta { mode: TrainMode::Untrained, refined: false, epochs: 0, emd_weight: 0.0, kal: None };
        Ok(Self { config, io, norm, params, meta, net })
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params
    }

    /// Normalized token features; fails if the bundle does not match the layout.
    pub fn features(&self, bundle: &CoarseBundle) -> Result<Array2<f64>> {
        let layout = bundle.layout();
        if layout != self.io.layout {
            if let Some(missing) = self.io.layout.iter().find(|n| !layout.contains(n)) {
                return Err(Error::Shape(format!("input is missing entry `{missing}`")));
            }
            return Err(Error::Shape(format!(
                "input entries {layout:?} do not match the model layout {:?}",
                self.io.layout
            )));
        }
        if bundle.context_len != self.io.context_len || bundle.zoom != self.io.zoom {
            return Err(Error::Shape(format!(
                "input has {} intervals at zoom {}, model expects {} at zoom {}",
                bundle.context_len, bundle.zoom, self.io.context_len, self.io.zoom
            )));
        }
        let n = &self.norm;
        Ok(Array2::from_shape_fn((bundle.context_len, bundle.entries.len()), |(j, e)| {
            (bundle.entries[e].values[j] - n.input_mean[e]) / n.input_std[e]
        }))
    }

    /// Output in target-scale units.
    pub(crate) fn forward_norm(&self, x: &Array2<f64>) -> Vec<f64> {
        self.net.forward(&self.params, x, None).0
    }

    /// Imputed fine series in physical units, non-negative but not rounded.
    pub fn forward(&self, bundle: &CoarseBundle) -> Result<FineSeries> {
        let x = self.features(bundle)?;
        let values = self.forward_norm(&x).into_iter().map(|v| v * self.norm.target_scale).collect();
        FineSeries::relaxed(&self.io.target, values, self.io.granularity_ms, self.io.domain)
    }

    pub fn predict(&self, windows: &[WindowExample]) -> Result<Vec<FineSeries>> {
        windows.par_iter().map(|w| self.forward(&w.input)).collect()
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let data = CheckpointData {
            config: self.config.clone(),
            io: self.io.clone(),
            norm: self.norm.clone(),
            meta: self.meta.clone(),
            params: self.params.clone(),
        };
        Ok(format!("{CHECKPOINT_MAGIC}\n{}\n", serde_json::to_string(&data)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_checkpoint_string()?.as_bytes())
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let (magic, body) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "unrecognised header `{}` (expected `{CHECKPOINT_MAGIC}`)",
                magic.chars().take(40).collect::<String>()
            )));
        }
        let data: CheckpointData =
            serde_json::from_str(body).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint body: {e}")))?;
        data.config.validate()?;
        let net = build_net(&data.config, &data.io);
        if net.n_params != data.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match the architecture ({})",
                data.params.len(),
                net.n_params
            )));
        }
        Ok(Self { config: data.config, io: data.io, norm: data.norm, params: data.params, meta: data.meta, net })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub(crate) fn net(&self) -> &nn::Net {
        &self.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatasetPlan, TrafficConfig};

    fn windows() -> Vec<WindowExample> {
        let mut cfg = TrafficConfig::bursty();
        cfg.duration_ms = 2_500;
        let mut plan = DatasetPlan::new(50, 5, 3);
        plan.traces_per_config = 1;
        build_dataset(&[cfg], &plan).unwrap().train
    }

    #[test]
    fn output_shape_and_determinism() {
        let w = windows();
        let m = Model::new(ModelConfig::small(1), &w).unwrap();
        let a = m.forward(&w[0].input).unwrap();
        assert_eq!(a.len(), 250);
        assert!(a.values.iter().all(|v| *v >= 0.0));
        assert_eq!(a, m.forward(&w[0].input).unwrap());
    }

    #[test]
    fn layout_mismatch_names_entry() {
        let w = windows();
        let m = Model::new(ModelConfig::small(1), &w).unwrap();
        let mut b = w[0].input.clone();
        b.entries.remove(1);
        match m.forward(&b) {
            Err(Error::Shape(msg)) => assert!(msg.contains("qlen.periodic"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let w = windows();
        let m = Model::new(ModelConfig::small(2), &w).unwrap();
        let text = m.to_checkpoint_string().unwrap();
        let back = Model::from_checkpoint_str(&text).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.forward(&w[0].input).unwrap(), m.forward(&w[0].input).unwrap());
        assert!(matches!(Model::from_checkpoint_str("OLD v0\n{}"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = ModelConfig::small(0);
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
