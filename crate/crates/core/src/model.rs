//! The vanilla landmark regressor: inter-ocular-normalized L2 loss, mini-batch
//! Adam training with early stopping, prediction and feature taps.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::container::Container;
use crate::dataio::{Dataset, NormalizationStats, Sample};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::network::{backward_stack, forward_stack, forward_stack_traced, Architecture, Gradients, Layer, Network};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inter-ocular distances below this are rejected as degenerate ground truth.
pub const MIN_INTER_OCULAR: f64 = 1e-9;

fn checked_inter_ocular<T: Scalar>(truth: &LandmarkSet<T>) -> Result<T> {
    let iod = truth.inter_ocular();
    if !(iod.as_f64() >= MIN_INTER_OCULAR) {
        return Err(Error::DegenerateGroundTruth(iod.as_f64()));
    }
    Ok(iod)
}

/// `||P − P̂||² / ||p̂₁ − p̂₂||²` over the `2m` coordinates.
pub fn loss<T: Scalar>(predicted: &LandmarkSet<T>, truth: &LandmarkSet<T>) -> Result<T> {
    Ok(loss_and_grad(&predicted.to_flat(), truth)?.0)
}

/// Loss of a flat prediction and its gradient with respect to that prediction.
pub fn loss_and_grad<T: Scalar>(predicted: &[T], truth: &LandmarkSet<T>) -> Result<(T, Vec<T>)> {
    if predicted.len() != 2 * truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted coordinates for {} landmarks",
            predicted.len(),
            truth.len()
        )));
    }
    let iod = checked_inter_ocular(truth)?;
    let norm = iod * iod;
    let target = truth.to_flat();
    let mut sum = T::zero();
    let two = T::lit(2.0);
    let grad = predicted
        .iter()
        .zip(&target)
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / norm
        })
        .collect();
    Ok((sum / norm, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epoch cap.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Abort when a batch's mean loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            seed: 0,
            validation_fraction: 0.1,
            patience: 50,
            adam: AdamConfig::default(),
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

/// Per-epoch losses. Epoch 0 evaluates the initial weights before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// True when patience ran out before the epoch cap.
    pub stopped_early: bool,
}

impl TrainLog {
    /// Tab-separated table; the wall-time column is omitted when `with_time` is false.
    pub fn to_tsv(&self, with_time: bool) -> String {
        let mut s = String::from(if with_time {
            "epoch\ttrain_loss\tval_loss\twall_secs\n"
        } else {
            "epoch\ttrain_loss\tval_loss\n"
        });
        for r in &self.records {
            if with_time {
                s.push_str(&format!("{}\t{}\t{}\t{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.wall_secs));
            } else {
                s.push_str(&format!("{}\t{}\t{}\n", r.epoch, r.train_loss, r.val_loss));
            }
        }
        s
    }

    pub fn last_epoch(&self) -> usize {
        self.records.last().map(|r| r.epoch).unwrap_or(0)
    }
}

/// One supervised pair: network input and target landmarks.
pub type Example<'a, T> = (&'a Tensor<T>, &'a LandmarkSet<T>);

pub(crate) fn stack_params_mut<T: Scalar>(layers: &mut [Layer<T>]) -> Vec<&mut Tensor<T>> {
    layers.iter_mut().filter_map(|l| l.params_mut()).flat_map(|(w, b)| [w, b]).collect()
}

pub(crate) fn stack_params<T: Scalar>(layers: &[Layer<T>]) -> Vec<&Tensor<T>> {
    layers.iter().filter_map(|l| l.params()).flat_map(|(w, b)| [w, b]).collect()
}

/// Mean loss of a stack over examples. Per-example losses are summed in
/// example order, so the result does not depend on the worker count.
pub fn mean_loss<T: Scalar>(layers: &[Layer<T>], examples: &[Example<'_, T>]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|(x, y)| {
            let out = forward_stack(layers, x)?;
            Ok(loss_and_grad(out.data(), y)?.0.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch Adam on a layer stack with early stopping. On return `layers`
/// holds the snapshot with the lowest validation loss (possibly the initial
/// weights). `patience = 0` evaluates and returns without training.
pub fn fit_stack<T: Scalar>(
    layers: &mut [Layer<T>],
    train: &[Example<'_, T>],
    val: &[Example<'_, T>],
    cfg: &TrainConfig,
    stream: &str,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("no validation examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = rng::stream(cfg.seed, stream);
    let mut adam = AdamState::new(&stack_params(layers), cfg.adam);
    let first = EpochRecord {
        epoch: 0,
        train_loss: mean_loss(layers, train)?,
        val_loss: mean_loss(layers, val)?,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    let mut best = layers.to_vec();
    let mut log = TrainLog {
        best_epoch: 0,
        best_val_loss: first.val_loss,
        records: vec![first],
        stopped_early: false,
    };
    if cfg.patience == 0 {
        return Ok(log);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let per: Vec<(T, Gradients<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = train[i];
                    let trace = forward_stack_traced(layers, x)?;
                    let (l, g) = loss_and_grad(trace.output.data(), y)?;
                    let g = Tensor::from_vec(trace.output.shape(), g)?;
                    let (_, grads) = backward_stack(layers, &trace, &g, false)?;
                    Ok((l, grads))
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(layers);
            let mut batch_loss = T::zero();
            for (l, g) in &per {
                batch_loss += *l;
                total.accumulate(g)?;
            }
            let inv = T::one() / T::from_usize_lossy(batch.len());
            total.scale(inv);
            let bl = (batch_loss * inv).as_f64();
            if !bl.is_finite() || bl > cfg.divergence_threshold {
                return Err(Error::Divergence { epoch, loss: bl });
            }
            epoch_sum += batch_loss.as_f64();
            adam.step(&mut stack_params_mut(layers), &total.tensors())?;
        }
        let val_loss = mean_loss(layers, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_sum / train.len() as f64,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        debug!("epoch {epoch}: train {:.6} val {:.6}", rec.train_loss, rec.val_loss);
        log.records.push(rec);
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best.clone_from_slice(layers);
        } else if epoch - log.best_epoch >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }
    layers.clone_from_slice(&best);
    Ok(log)
}

/// A trained network together with the normalization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T> {
    pub network: Network<T>,
    pub stats: NormalizationStats<T>,
}

impl<T: Scalar> NetworkModel<T> {
    pub fn landmark_count(&self) -> usize {
        self.network.arch.output_len().unwrap_or(0) / 2
    }

    /// Raw network output as landmarks; no clamping.
    pub fn predict(&self, sample: &Sample<T>) -> Result<LandmarkSet<T>> {
        LandmarkSet::from_tensor(&self.network.forward(&sample.image)?)
    }

    /// Flattened activation entering the named layer (`input`, `CL1`..`CL4`, `FC5`).
    pub fn extract_features(&self, sample: &Sample<T>, tap: &str) -> Result<Tensor<T>> {
        self.network.features(&sample.image, tap)
    }

    pub fn to_container(&self) -> Container {
        let arch = serde_json::to_value(&self.network.arch).expect("architecture serializes");
        let mut c = Container::new("network", serde_json::json!({ "architecture": arch }));
        for (i, layer) in self.network.layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                c.push(format!("layer{i}.weight"), w);
                c.push(format!("layer{i}.bias"), b);
            }
        }
        c.push("norm.mean", &self.stats.mean);
        c.push("norm.std", &self.stats.std);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("network")?;
        let arch: Architecture = serde_json::from_value(
            c.meta.get("architecture").cloned().ok_or_else(|| Error::Format("missing architecture".into()))?,
        )?;
        let mut layers = crate::network::zero_layers::<T>(&arch)?;
        for (i, layer) in layers.iter_mut().enumerate() {
            if let Some((w, b)) = layer.params_mut() {
                *w = c.get(&format!("layer{i}.weight"))?;
                *b = c.get(&format!("layer{i}.bias"))?;
            }
        }
        let network = Network::from_layers(arch, layers)?;
        let stats = NormalizationStats { mean: c.get("norm.mean")?, std: c.get("norm.std")? };
        Ok(Self { network, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn examples<T: Scalar>(samples: &[Sample<T>]) -> Vec<Example<'_, T>> {
    samples.iter().map(|s| (&s.image, &s.landmarks)).collect()
}

/// Trains the vanilla network on `dataset.train`, early-stopping on `dataset.validation`.
pub fn train_vanilla<T: Scalar>(
    dataset: &Dataset<T>,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(NetworkModel<T>, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let m = arch.output_len()? / 2;
    if let Some(s) = dataset.train.iter().chain(&dataset.validation).find(|s| s.landmarks.len() != m) {
        return Err(Error::Shape(format!(
            "architecture regresses {m} landmarks, sample {} has {}",
            s.id,
            s.landmarks.len()
        )));
    }
    let mut network = Network::new(arch.clone(), &mut rng::stream(cfg.seed, "init"))?;
    let log = fit_stack(
        &mut network.layers,
        &examples(&dataset.train),
        &examples(&dataset.validation),
        cfg,
        "train",
    )?;
    info!(
        "vanilla training: best epoch {} of {}, validation loss {:.6}",
        log.best_epoch,
        log.last_epoch(),
        log.best_val_loss
    );
    Ok((NetworkModel { network, stats: dataset.stats.clone() }, log))
}
