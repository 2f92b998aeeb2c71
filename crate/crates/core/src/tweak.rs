//! Cluster-specific heads over a frozen trunk: the router assigns each sample
//! to a mixture component from its tap features, and that component's copy
//! of the final layers produces the landmarks.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_cluster, AugmentConfig, AugmentStats, Router};
use crate::container::Container;
use crate::dataio::{mirror_sample, Sample};
use crate::error::{Error, Result};
use crate::gmm::{self, FeatureMatrix, GmmConfig, GmmModel};
use crate::landmarks::LandmarkSet;
use crate::model::{fit_stack, Example, NetworkModel, TrainConfig, TrainLog};
use crate::network::{forward_stack, Layer};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweakConfig {
    pub k: usize,
    pub patience: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Head learning rate relative to the vanilla one.
    pub learning_rate_factor: f64,
    pub validation_fraction: f64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub gmm: GmmConfig,
    pub seed: u64,
}

impl Default for TweakConfig {
    fn default() -> Self {
        Self {
            k: 8,
            patience: 50,
            epochs: 400,
            batch_size: 64,
            learning_rate_factor: 0.1,
            validation_fraction: 0.1,
            augment: Some(AugmentConfig::default()),
            gmm: GmmConfig::default(),
            seed: 0,
        }
    }
}

impl TweakConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 1)", self.validation_fraction)));
        }
        if !(self.learning_rate_factor > 0.0) {
            return Err(Error::Config("learning rate factor must be positive".into()));
        }
        Ok(())
    }
}

/// Training record of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub cluster: usize,
    pub members: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// The head kept the vanilla weights.
    pub fallback: bool,
    pub augment: Option<AugmentStats>,
    pub log: Option<TrainLog>,
}

impl HeadReport {
    pub fn epochs(&self) -> usize {
        self.log.as_ref().map_or(0, TrainLog::last_epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TweakedModel<T> {
    /// The vanilla model, untouched.
    pub trunk: NetworkModel<T>,
    pub tap: String,
    pub tap_index: usize,
    pub router: GmmModel<T>,
    /// Per cluster, the layers from the tap to the output.
    pub heads: Vec<Vec<Layer<T>>>,
    pub reports: Vec<HeadReport>,
}

/// Result of [`build_tweaked`] with the training-set routing it used.
#[derive(Debug, Clone)]
pub struct TweakBuild<T> {
    pub model: TweakedModel<T>,
    pub assignments: Vec<usize>,
}

fn tap_features<T: Scalar>(trunk: &NetworkModel<T>, tap_index: usize, samples: &[&Sample<T>]) -> Result<Vec<Tensor<T>>> {
    samples.par_iter().map(|s| trunk.network.features_at(&s.image, tap_index)).collect()
}

/// Splits cluster members 90/10 with a per-cluster stream.
fn member_split(members: &[usize], fraction: f64, seed: u64, cluster: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx = members.to_vec();
    idx.shuffle(&mut rng::stream(seed, &format!("tweak/{cluster}/split")));
    let n = idx.len();
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Fine-tunes one head on its cluster's samples; the vanilla weights are the
/// starting point and epoch 0 of the log.
#[allow(clippy::too_many_arguments)]
pub fn train_head<T: Scalar>(
    head: &mut [Layer<T>],
    trunk: &NetworkModel<T>,
    tap_index: usize,
    router: &GmmModel<T>,
    cluster: usize,
    train: &[&Sample<T>],
    validation: &[&Sample<T>],
    cfg: &TweakConfig,
    base: &TrainConfig,
) -> Result<HeadReport> {
    let mut report = HeadReport {
        cluster,
        members: train.len() + validation.len(),
        train_samples: train.len(),
        validation_samples: validation.len(),
        fallback: false,
        augment: None,
        log: None,
    };
    if validation.len() < 2 || train.is_empty() {
        warn!(
            "cluster {cluster}: {} training / {} validation members, keeping vanilla head",
            train.len(),
            validation.len()
        );
        report.fallback = true;
        return Ok(report);
    }
    let mut train_set: Vec<Sample<T>> = train.iter().map(|&s| s.clone()).collect();
    if let Some(aug) = cfg.augment.filter(|_| train.len() >= 2) {
        let r = Router { trunk: &trunk.network, tap_index, gmm: router };
        let mut arng = rng::stream(cfg.seed, &format!("augment/{cluster}"));
        let (set, stats) = augment_cluster(&r, cluster, train, &aug, &mut arng)?;
        train_set = set;
        report.augment = Some(stats);
    }
    report.train_samples = train_set.len();
    let train_refs: Vec<&Sample<T>> = train_set.iter().collect();
    let train_x = tap_features(trunk, tap_index, &train_refs)?;
    let val_x = tap_features(trunk, tap_index, validation)?;
    let train_ex: Vec<Example<'_, T>> = train_x.iter().zip(&train_set).map(|(x, s)| (x, &s.landmarks)).collect();
    let val_ex: Vec<Example<'_, T>> = val_x.iter().zip(validation).map(|(x, s)| (x, &s.landmarks)).collect();
    let mut tc = *base;
    tc.epochs = cfg.epochs;
    tc.patience = cfg.patience;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    tc.adam.learning_rate = base.adam.learning_rate * cfg.learning_rate_factor;
    let log = fit_stack(head, &train_ex, &val_ex, &tc, &format!("tweak/{cluster}"))?;
    info!(
        "cluster {cluster}: head trained {} epochs, best epoch {} (val {:.5} from {:.5})",
        log.last_epoch(),
        log.best_epoch,
        log.best_val_loss,
        log.records[0].val_loss
    );
    report.log = Some(log);
    Ok(report)
}

/// Fits the router on tap features of `train` and fine-tunes one head per
/// cluster. `base` supplies the vanilla optimizer settings.
pub fn build_tweaked<T: Scalar>(
    vanilla: &NetworkModel<T>,
    tap: &str,
    train: &[Sample<T>],
    cfg: &TweakConfig,
    base: &TrainConfig,
) -> Result<TweakBuild<T>> {
    cfg.validate()?;
    let tap_index = vanilla.network.arch.tap_index(tap)?;
    let fm = feature_matrix(vanilla, tap_index, train)?;
    let mut router = gmm::fit(&fm, cfg.k, cfg.seed, &cfg.gmm)?.model;
    router.tap = tap.to_string();
    drop(fm);
    build_tweaked_with_router(vanilla, router, train, cfg, base)
}

/// Tap features of every sample as one matrix.
pub fn feature_matrix<T: Scalar>(model: &NetworkModel<T>, tap_index: usize, samples: &[Sample<T>]) -> Result<FeatureMatrix<T>> {
    let refs: Vec<&Sample<T>> = samples.iter().collect();
    FeatureMatrix::from_tensors(&tap_features(model, tap_index, &refs)?)
}

/// [`build_tweaked`] with an already fitted router; its tap and component
/// count override `cfg.k`.
pub fn build_tweaked_with_router<T: Scalar>(
    vanilla: &NetworkModel<T>,
    router: GmmModel<T>,
    train: &[Sample<T>],
    cfg: &TweakConfig,
    base: &TrainConfig,
) -> Result<TweakBuild<T>> {
    let cfg = &TweakConfig { k: router.components(), ..*cfg };
    cfg.validate()?;
    let tap = router.tap.clone();
    let tap_index = vanilla.network.arch.tap_index(&tap)?;
    let assignments = router.assign_all(&feature_matrix(vanilla, tap_index, train)?)?;
    let vanilla_head: Vec<Layer<T>> = vanilla.network.layers[tap_index..].to_vec();
    let mut heads = Vec::with_capacity(cfg.k);
    let mut reports = Vec::with_capacity(cfg.k);
    for c in 0..cfg.k {
        let members: Vec<usize> = (0..train.len()).filter(|&i| assignments[i] == c).collect();
        let (tr, va) = member_split(&members, cfg.validation_fraction, cfg.seed, c);
        let tr: Vec<&Sample<T>> = tr.iter().map(|&i| &train[i]).collect();
        let va: Vec<&Sample<T>> = va.iter().map(|&i| &train[i]).collect();
        let mut head = vanilla_head.clone();
        let report = train_head(&mut head, vanilla, tap_index, &router, c, &tr, &va, cfg, base)?;
        heads.push(head);
        reports.push(report);
    }
    let model = TweakedModel { trunk: vanilla.clone(), tap, tap_index, router, heads, reports };
    Ok(TweakBuild { model, assignments })
}

impl<T: Scalar> TweakedModel<T> {
    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn features(&self, sample: &Sample<T>) -> Result<Tensor<T>> {
        self.trunk.network.features_at(&sample.image, self.tap_index)
    }

    pub fn route(&self, sample: &Sample<T>) -> Result<usize> {
        Ok(self.router.assign(self.features(sample)?.data())?.0)
    }

    fn predict_single(&self, sample: &Sample<T>) -> Result<(usize, LandmarkSet<T>)> {
        let f = self.features(sample)?;
        let k = self.router.assign(f.data())?.0;
        Ok((k, LandmarkSet::from_tensor(&forward_stack(&self.heads[k], &f)?)?))
    }

    /// Routes and applies the selected head. With `mirror_average` the
    /// flipped sample is predicted as well (routed on its own), flipped back
    /// and averaged coordinate-wise.
    pub fn predict(&self, sample: &Sample<T>, mirror_average: bool) -> Result<LandmarkSet<T>> {
        let (_, direct) = self.predict_single(sample)?;
        if !mirror_average {
            return Ok(direct);
        }
        let (_, flipped) = self.predict_single(&mirror_sample(sample)?)?;
        Ok(direct.mean_with(&flipped.mirrored()?))
    }

    /// Cluster index and single-orientation prediction.
    pub fn route_and_predict(&self, sample: &Sample<T>) -> Result<(usize, LandmarkSet<T>)> {
        self.predict_single(sample)
    }

    fn head_container(&self, k: usize) -> Container {
        let mut c = Container::new(
            "head",
            serde_json::json!({ "cluster": k, "tap": self.tap, "tap_index": self.tap_index }),
        );
        for (i, layer) in self.heads[k].iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                c.push(format!("layer{}.weight", self.tap_index + i), w);
                c.push(format!("layer{}.bias", self.tap_index + i), b);
            }
        }
        c
    }

    /// Writes `trunk.tcnn`, `router.tcnn`, `head{k}.tcnn`, per-head logs and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let trunk = self.trunk.to_container().to_bytes()?;
        fs::write(dir.join("trunk.tcnn"), &trunk)?;
        self.router.save(&dir.join("router.tcnn"))?;
        for k in 0..self.k() {
            self.head_container(k).write(&dir.join(format!("head{k}.tcnn")))?;
            if let Some(log) = &self.reports[k].log {
                fs::write(dir.join(format!("head{k}.log.tsv")), log.to_tsv(false))?;
            }
        }
        let manifest = TweakManifest {
            k: self.k(),
            tap: self.tap.clone(),
            trunk_sha256: hex::encode(Sha256::digest(&trunk)),
            heads: self.reports.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TweakManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let trunk_bytes = fs::read(dir.join("trunk.tcnn"))?;
        if hex::encode(Sha256::digest(&trunk_bytes)) != manifest.trunk_sha256 {
            return Err(Error::Format("trunk checksum does not match the manifest".into()));
        }
        let trunk = NetworkModel::from_container(&Container::from_bytes(&trunk_bytes)?)?;
        let router = GmmModel::load(&dir.join("router.tcnn"))?;
        let tap_index = trunk.network.arch.tap_index(&manifest.tap)?;
        if router.components() != manifest.k {
            return Err(Error::Format(format!("router has {} components, manifest {}", router.components(), manifest.k)));
        }
        let mut heads = Vec::with_capacity(manifest.k);
        for k in 0..manifest.k {
            let c = Container::read(&dir.join(format!("head{k}.tcnn")))?;
            c.expect_kind("head")?;
            let mut head: Vec<Layer<T>> = trunk.network.layers[tap_index..].to_vec();
            for (i, layer) in head.iter_mut().enumerate() {
                if let Some((w, b)) = layer.params_mut() {
                    let nw: Tensor<T> = c.get(&format!("layer{}.weight", tap_index + i))?;
                    let nb: Tensor<T> = c.get(&format!("layer{}.bias", tap_index + i))?;
                    if nw.shape() != w.shape() || nb.shape() != b.shape() {
                        return Err(Error::Format(format!("head {k} parameter shapes differ from the trunk's")));
                    }
                    *w = nw;
                    *b = nb;
                }
            }
            heads.push(head);
        }
        Ok(Self { trunk, tap: manifest.tap, tap_index, router, heads, reports: manifest.heads })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TweakManifest {
    k: usize,
    tap: String,
    trunk_sha256: String,
    heads: Vec<HeadReport>,
}
