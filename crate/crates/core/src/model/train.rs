//! Minibatch training with Adam and early stopping.
//!
//! Per-example gradients are computed in fixed-size chunks that run in
//! parallel and are summed in chunk order, so results do not depend on the
//! number of worker threads.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::class_loss_grad;
use super::{Model, TrainMode};
use crate::datagen::trace_seed;
use crate::series::WindowExample;
use crate::{Error, Result};

const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub emd_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 40, patience: 5, batch_size: 32, learning_rate: 1e-3, emd_weight: 1.0, grad_clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.emd_weight >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("learning_rate must be positive; emd_weight and grad_clip non-negative".into()));
        }
        Ok(())
    }
}

/// A per-example loss on the model's normalized output.
pub trait Objective: Sync {
    /// Loss and gradient for training example `i`.
    fn train_term(&self, i: usize, out: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Loss for validation example `i`.
    fn val_term(&self, i: usize, out: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_val: f64,
}

/// Training state that persists across repeated inner loops.
pub struct Session<'a> {
    pub model: &'a mut Model,
    adam: Adam,
    train_x: Vec<Array2<f64>>,
    val_x: Vec<Array2<f64>>,
    cfg: TrainConfig,
    epochs_run: usize,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a mut Model, train: &[WindowExample], val: &[WindowExample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let train_x = train.iter().map(|w| model.features(&w.input)).collect::<Result<_>>()?;
        let val_x = val.iter().map(|w| model.features(&w.input)).collect::<Result<_>>()?;
        let adam = Adam::new(model.n_params(), cfg.learning_rate);
        Ok(Self { model, adam, train_x, val_x, cfg: cfg.clone(), epochs_run: 0 })
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn train_len(&self) -> usize {
        self.train_x.len()
    }

    /// Normalized outputs for every training example, eval mode.
    pub fn train_outputs(&self) -> Vec<Vec<f64>> {
        self.train_x.par_iter().map(|x| self.model.forward_norm(x)).collect()
    }

    pub fn val_outputs(&self) -> Vec<Vec<f64>> {
        self.val_x.par_iter().map(|x| self.model.forward_norm(x)).collect()
    }

    fn val_loss(&self, obj: &dyn Objective) -> Result<f64> {
        if self.val_x.is_empty() {
            return Ok(f64::NAN);
        }
        let terms: Vec<f64> = self
            .val_outputs()
            .par_iter()
            .enumerate()
            .map(|(i, out)| obj.val_term(i, out))
            .collect::<Result<_>>()?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }

    fn epoch(&mut self, obj: &dyn Objective, outer_iter: usize) -> Result<f64> {
        let n = self.train_x.len();
        let n_params = self.model.n_params();
        let epoch_seed = trace_seed(self.cfg.seed, self.epochs_run as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let dropout = self.model.config.dropout;
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let model = &*self.model;
            let net = model.net();
            let train_x = &self.train_x;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0.0; n_params];
                    let mut loss = 0.0;
                    for &i in chunk {
                        let mut rng = ChaCha8Rng::seed_from_u64(trace_seed(epoch_seed, i as u64));
                        let drop = (dropout > 0.0).then_some((dropout, &mut rng));
                        let (out, cache) = net.forward(&model.params, &train_x[i], drop);
                        let (l, dout) = obj.train_term(i, &out)?;
                        loss += l;
                        net.backward(&model.params, &cache, &dout, &mut grad);
                    }
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for (l, g) in parts {
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training { outer_iter, msg: format!("non-finite loss in epoch {}", self.epochs_run) });
            }
            if self.cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > self.cfg.grad_clip {
                    let f = self.cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= f);
                }
            }
            self.adam.step(&mut self.model.params, &grad);
            total += loss;
        }
        self.epochs_run += 1;
        Ok(total / n as f64)
    }

    /// Train until the validation loss stops improving for `patience` epochs
    /// (or `max_epochs` is reached) and restore the best parameters.
    pub fn train_until_converged(&mut self, obj: &dyn Objective, outer_iter: usize) -> Result<TrainLog> {
        let mut log = TrainLog { epochs: Vec::new(), best_val: f64::INFINITY };
        let mut best_params = self.model.params.clone();
        let mut since_best = 0;
        for _ in 0..self.cfg.max_epochs {
            let train_loss = self.epoch(obj, outer_iter)?;
            let val_loss = self.val_loss(obj)?;
            log.epochs.push(EpochRecord { epoch: self.epochs_run, train_loss, val_loss });
            if val_loss.is_nan() {
                // no validation data: keep the latest parameters
                best_params.clone_from(&self.model.params);
                log.best_val = train_loss;
                continue;
            }
            if val_loss < log.best_val {
                log.best_val = val_loss;
                best_params.clone_from(&self.model.params);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.cfg.patience {
                    break;
                }
            }
        }
        self.model.params = best_params;
        Ok(log)
    }
}

/// Normalized target sets: one or more acceptable targets per example.
pub fn normalized(model: &Model, values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| v / model.norm.target_scale).collect()
}

/// Base loss over target sets: `l_combine` for single targets, the class
/// minimum otherwise.
pub struct TargetObjective {
    pub train: Vec<Vec<Vec<f64>>>,
    pub val: Vec<Vec<f64>>,
    pub emd_weight: f64,
}

impl TargetObjective {
    pub fn new(model: &Model, train: &[Vec<Vec<f64>>], val: &[WindowExample], emd_weight: f64) -> Self {
        Self {
            train: train.iter().map(|set| set.iter().map(|t| normalized(model, t)).collect()).collect(),
            val: val.iter().map(|w| normalized(model, &w.target.values)).collect(),
            emd_weight,
        }
    }
}

impl Objective for TargetObjective {
    fn train_term(&self, i: usize, out: &[f64]) -> Result<(f64, Vec<f64>)> {
        class_loss_grad(out, &self.train[i], self.emd_weight)
    }

    fn val_term(&self, i: usize, out: &[f64]) -> Result<f64> {
        super::loss::l_combine(out, &self.val[i], self.emd_weight)
    }
}

/// Train on `l_combine` (plain MSE when `emd_weight` is 0).
pub fn fit_plain(model: &mut Model, train: &[WindowExample], val: &[WindowExample], cfg: &TrainConfig) -> Result<TrainLog> {
    let sets: Vec<Vec<Vec<f64>>> = train.iter().map(|w| vec![w.target.values.clone()]).collect();
    fit_targets(model, train, &sets, val, cfg)
}

/// Train against per-example target sets (physical units).
pub fn fit_targets(
    model: &mut Model,
    train: &[WindowExample],
    targets: &[Vec<Vec<f64>>],
    val: &[WindowExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if targets.len() != train.len() {
        return Err(Error::Shape("one target set per training example is required".into()));
    }
    let obj = TargetObjective::new(model, targets, val, cfg.emd_weight);
    let refined = targets.iter().any(|t| t.len() > 1);
    let mut session = Session::new(model, train, val, cfg)?;
    let log = session.train_until_converged(&obj, 0)?;
    let epochs = session.epochs_run();
    model.meta.mode = TrainMode::Plain;
    model.meta.refined = refined;
    model.meta.epochs = epochs;
    model.meta.emd_weight = cfg.emd_weight;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{l_combine, ModelConfig};
    use crate::datagen::{build_dataset, DatasetPlan, TrafficConfig};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut a = Adam::new(2, 0.1);
        a.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn single_example_overfits() {
        let mut cfg = TrafficConfig::bursty();
        cfg.duration_ms = 2_500;
        let mut plan = DatasetPlan::new(50, 5, 8);
        plan.traces_per_config = 1;
        let ds = build_dataset(&[cfg], &plan).unwrap();
        let one: Vec<WindowExample> = ds.train.iter().filter(|w| w.target.values.iter().any(|v| *v > 0.0)).take(1).cloned().collect();
        let mut model = Model::new(ModelConfig::small(4), &one).unwrap();
        let target = normalized(&model, &one[0].target.values);
        let initial = l_combine(&model.forward_norm(&model.features(&one[0].input).unwrap()), &target, 1.0).unwrap();
        let tc = TrainConfig { max_epochs: 1000, batch_size: 1, learning_rate: 3e-3, grad_clip: 0.0, ..TrainConfig::default() };
        fit_plain(&mut model, &one, &[], &tc).unwrap();
        let fin = l_combine(&model.forward_norm(&model.features(&one[0].input).unwrap()), &target, 1.0).unwrap();
        assert!(fin < 1e-2 * initial, "initial {initial} final {fin}");
    }
}
