//! Run-directory stages: data, vanilla training, clustering, analysis,
//! tweaking, evaluation and the K sweep. Every stage reads its inputs from
//! the run directory and writes its outputs below it.
//!
//! ```text
//! run/
//!   run_config.toml
//!   data/        synthetic dataset (when no annotation file is configured)
//!   model/       vanilla.tcnn, train_log.tsv, summary.json
//!   cluster/     router.tcnn, assignments.tsv, em_trace.tsv, sizes.tsv
//!   analysis/    landmark_variance.tsv, attribute_variance.tsv, cluster_sizes.tsv, *.png
//!   tweak/       model/ (trunk, router, heads, manifest), augment.tsv, rejection.tsv
//!   eval/        errors.tsv, per_cluster.tsv, curves.tsv, summary.json, *.png
//!   sweepk/      sweepk.tsv, summary.json, sweepk.png
//!   report.md
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, ErrorSummary, LayerReport};
use crate::augment::{cross_cluster_rejection, same_cluster_rejection, AugmentConfig, AugmentStats, Router};
use crate::dataio::{load_records, Dataset, NormalizationStats, Sample};
use crate::error::{Error, Result};
use crate::gmm::{self, GmmConfig, GmmModel};
use crate::landmarks::{LandmarkSet, ROLES};
use crate::model::{train_vanilla, NetworkModel, TrainConfig};
use crate::network::{Architecture, CROP};
use crate::plot;
use crate::raster;
use crate::rng;
use crate::synth::{synth_generate, SynthConfig};
use crate::tweak::{build_tweaked_with_router, feature_matrix, HeadReport, TweakConfig, TweakedModel};

pub const CONFIG_FILE: &str = "run_config.toml";
pub const VANILLA: &str = "model/vanilla.tcnn";
pub const ROUTER: &str = "cluster/router.tcnn";
pub const TWEAKED: &str = "tweak/model";
pub const EVAL_SUMMARY: &str = "eval/summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Annotation file; when absent a synthetic dataset is generated under `data/`.
    pub annotations: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the annotation file's directory.
    pub image_root: Option<PathBuf>,
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { annotations: None, image_root: None, validation_fraction: 1.0 / 11.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub modes: usize,
    pub jitter: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { count: 4400, modes: 3, jitter: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 25, batch_size: 64, patience: 50, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub tap: String,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { k: 8, tap: "FC5".into(), max_iterations: 300, tolerance: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub k: usize,
    /// Taps to analyse; empty means every tap from the input to the first dense layer.
    pub taps: Vec<String>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { k: 8, taps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TweakSection {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate_factor: f64,
    pub validation_fraction: f64,
    pub augment: bool,
    pub augment_target: usize,
    pub retry_factor: usize,
    /// Candidates per cluster for the same- vs cross-cluster rejection probe; 0 disables it.
    pub rejection_probe: usize,
}

impl Default for TweakSection {
    fn default() -> Self {
        Self {
            epochs: 400,
            patience: 50,
            batch_size: 64,
            learning_rate_factor: 0.1,
            validation_fraction: 0.1,
            augment: true,
            augment_target: 600,
            retry_factor: 20,
            rejection_probe: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mirror: bool,
    pub max_threshold: f64,
    pub threshold_step: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { mirror: true, max_threshold: 20.0, threshold_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ks: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { ks: vec![1, 4, 8] }
    }
}

/// Everything a run depends on. Serialized into the run directory by the
/// first stage so later stages and reruns see the same settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub cluster: ClusterSection,
    pub analysis: AnalysisSection,
    pub tweak: TweakSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.tweak_config().validate()?;
        if self.data.annotations.is_none() && (self.synth.count == 0 || self.synth.modes == 0) {
            return Err(Error::Config("synthetic data needs a positive count and mode count".into()));
        }
        if self.cluster.k == 0 || self.analysis.k == 0 || self.sweep.ks.contains(&0) {
            return Err(Error::Config("cluster counts must be at least 1".into()));
        }
        if !(self.eval.threshold_step > 0.0 && self.eval.max_threshold >= 0.0) {
            return Err(Error::Config("error-curve thresholds need a positive step".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            validation_fraction: self.data.validation_fraction,
            patience: self.train.patience,
            ..TrainConfig::default()
        };
        t.adam.learning_rate = self.train.learning_rate;
        t
    }

    pub fn gmm_config(&self) -> GmmConfig {
        GmmConfig { max_iterations: self.cluster.max_iterations, tolerance: self.cluster.tolerance, ..GmmConfig::default() }
    }

    pub fn tweak_config(&self) -> TweakConfig {
        let t = &self.tweak;
        TweakConfig {
            k: self.cluster.k,
            patience: t.patience,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate_factor: t.learning_rate_factor,
            validation_fraction: t.validation_fraction,
            augment: t.augment.then_some(AugmentConfig { target: t.augment_target, retry_factor: t.retry_factor }),
            gmm: self.gmm_config(),
            seed: self.seed,
        }
    }

    /// Loads `run_config.toml` from a run directory.
    pub fn load(run: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(run.join(CONFIG_FILE))?)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        fs::create_dir_all(run)?;
        fs::write(run.join(CONFIG_FILE), self.to_toml())?;
        Ok(())
    }
}

fn require(run: &Path, rel: &str, command: &'static str) -> Result<PathBuf> {
    let p = run.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact { path: p, command })
    }
}

fn write(run: &Path, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = run.join(rel);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, contents)?;
    Ok(())
}

fn write_json<S: Serialize>(run: &Path, rel: &str, value: &S) -> Result<()> {
    write(run, rel, serde_json::to_string_pretty(value)? + "\n")
}

pub fn read_json<S: for<'de> Deserialize<'de>>(run: &Path, rel: &str) -> Result<S> {
    Ok(serde_json::from_slice(&fs::read(run.join(rel))?)?)
}

fn save_png(run: &Path, rel: &str, img: &image::RgbImage) -> Result<()> {
    let p = run.join(rel);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(p)?;
    Ok(())
}

/// The run's dataset plus the number of detector failures in the annotation file.
pub struct RunData {
    pub dataset: Dataset<f64>,
    pub failures: usize,
}

fn annotation_paths(cfg: &RunConfig, run: &Path) -> (PathBuf, PathBuf) {
    match &cfg.data.annotations {
        Some(a) => {
            let root = cfg.data.image_root.clone().unwrap_or_else(|| a.parent().map(Path::to_path_buf).unwrap_or_default());
            (a.clone(), root)
        }
        None => (run.join("data/annotations.txt"), run.join("data")),
    }
}

/// Generates the synthetic dataset under `data/` unless an annotation file
/// is configured or the data already exists.
pub fn ensure_data(cfg: &RunConfig, run: &Path) -> Result<()> {
    if cfg.data.annotations.is_some() || run.join("data/manifest.json").exists() {
        return Ok(());
    }
    let sc = SynthConfig { count: cfg.synth.count, modes: cfg.synth.modes, seed: cfg.seed, jitter: cfg.synth.jitter };
    let manifest = synth_generate(&sc)?.write(&run.join("data"))?;
    info!("synthesized {} faces ({} modes), checksum {}", manifest.count, manifest.modes, manifest.checksum);
    Ok(())
}

pub fn load_data(cfg: &RunConfig, run: &Path) -> Result<RunData> {
    let (ann, root) = annotation_paths(cfg, run);
    if !ann.exists() {
        return Err(Error::MissingArtifact { path: ann, command: "train" });
    }
    let loaded = load_records(&ann, &root)?;
    if loaded.crops.is_empty() {
        return Err(Error::EmptyDataset(format!("{} yielded no usable records", ann.display())));
    }
    let dataset = Dataset::from_crops(&loaded.crops, cfg.data.validation_fraction, cfg.seed)?;
    Ok(RunData { dataset, failures: loaded.failures.len() })
}

pub fn load_vanilla(run: &Path) -> Result<NetworkModel<f64>> {
    NetworkModel::load(&require(run, VANILLA, "train")?)
}

fn errors_of(pred: &[LandmarkSet<f64>], samples: &[Sample<f64>]) -> Result<Vec<f64>> {
    pred.iter().zip(samples).map(|(p, s)| analysis::error_rate(p, &s.landmarks)).collect()
}

fn vanilla_predictions(model: &NetworkModel<f64>, samples: &[Sample<f64>]) -> Result<Vec<LandmarkSet<f64>>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| model.predict(s)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_samples: usize,
    pub validation_samples: usize,
    pub parameters: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Mean validation error of the restored snapshot, percent of inter-ocular distance.
    pub val_error: f64,
}

/// Trains the vanilla network and writes `model/`.
pub fn stage_train(cfg: &RunConfig, run: &Path) -> Result<TrainSummary> {
    cfg.save(run)?;
    ensure_data(cfg, run)?;
    let data = load_data(cfg, run)?;
    let ds = &data.dataset;
    let m = ds.train[0].landmarks.len();
    let start = Instant::now();
    let (model, log) = train_vanilla(ds, &Architecture::default_for(m), &cfg.train_config())?;
    let secs = start.elapsed().as_secs_f64();
    model.save(&run.join(VANILLA))?;
    write(run, "model/train_log.tsv", log.to_tsv(false))?;
    write(run, "model/timing.tsv", format!("stage\twall_secs\ntrain\t{secs:.3}\n"))?;
    let val_error = mean(&errors_of(&vanilla_predictions(&model, &ds.validation)?, &ds.validation)?);
    let summary = TrainSummary {
        train_samples: ds.train.len(),
        validation_samples: ds.validation.len(),
        parameters: model.network.param_count(),
        epochs: log.last_epoch(),
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss,
        stopped_early: log.stopped_early,
        val_error,
    };
    write_json(run, "model/summary.json", &summary)?;
    info!("vanilla: {} epochs, validation error {val_error:.3}% in {secs:.1}s", summary.epochs);
    Ok(summary)
}

fn fit_router(cfg: &RunConfig, model: &NetworkModel<f64>, train: &[Sample<f64>], tap: &str, k: usize) -> Result<(GmmModel<f64>, Vec<f64>)> {
    let tap_index = model.network.arch.tap_index(tap)?;
    let fm = feature_matrix(model, tap_index, train)?;
    let fit = gmm::fit(&fm, k, cfg.seed, &cfg.gmm_config())?;
    let mut router = fit.model;
    router.tap = tap.to_string();
    Ok((router, fit.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub tap: String,
    pub sizes: Vec<usize>,
    pub em_iterations: usize,
    pub log_likelihood: f64,
}

/// Fits the routing mixture on the training split's tap features; writes `cluster/`.
pub fn stage_cluster(cfg: &RunConfig, run: &Path) -> Result<ClusterSummary> {
    let model = load_vanilla(run)?;
    let data = load_data(cfg, run)?;
    let train = &data.dataset.train;
    let (router, trace) = fit_router(cfg, &model, train, &cfg.cluster.tap, cfg.cluster.k)?;
    let tap_index = model.network.arch.tap_index(&cfg.cluster.tap)?;
    let assignments = router.assign_all(&feature_matrix(&model, tap_index, train)?)?;
    router.save(&run.join(ROUTER))?;
    let mut tsv = String::from("id\tcluster\n");
    for (s, a) in train.iter().zip(&assignments) {
        let _ = writeln!(tsv, "{}\t{a}", s.id);
    }
    write(run, "cluster/assignments.tsv", tsv)?;
    let mut tr = String::from("iteration\tlog_likelihood\n");
    for (i, ll) in trace.iter().enumerate() {
        let _ = writeln!(tr, "{i}\t{ll:.6}");
    }
    write(run, "cluster/em_trace.tsv", tr)?;
    let sizes = analysis::cluster_sizes(&assignments, cfg.cluster.k);
    let mut st = String::from("cluster\tsize\n");
    for (k, n) in sizes.iter().enumerate() {
        let _ = writeln!(st, "{k}\t{n}");
    }
    write(run, "cluster/sizes.tsv", st)?;
    let summary = ClusterSummary {
        k: cfg.cluster.k,
        tap: cfg.cluster.tap.clone(),
        sizes,
        em_iterations: trace.len(),
        log_likelihood: trace.last().copied().unwrap_or(f64::NAN),
    };
    write_json(run, "cluster/summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub k: usize,
    pub layers: Vec<LayerReport>,
}

impl AnalysisSummary {
    pub fn layer(&self, tap: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.tap == tap)
    }
}

/// Clusters the training split at every analysis tap and writes the
/// landmark- and attribute-variance tables, cluster sizes and mean images.
pub fn stage_analyze(cfg: &RunConfig, run: &Path) -> Result<AnalysisSummary> {
    let model = load_vanilla(run)?;
    let data = load_data(cfg, run)?;
    let ds = &data.dataset;
    let taps = if cfg.analysis.taps.is_empty() { model.network.arch.analysis_taps() } else { cfg.analysis.taps.clone() };
    let k = cfg.analysis.k;
    let landmarks: Vec<LandmarkSet<f64>> = ds.train.iter().map(|s| s.landmarks.clone()).collect();
    let attributes: Vec<Option<[u8; 3]>> = ds.train.iter().map(|s| s.attributes).collect();
    let crops: Vec<_> = ds.train.iter().map(|s| ds.stats.denormalize(&s.image)).collect::<Result<_>>()?;
    let crop_refs: Vec<_> = crops.iter().collect();
    let mut layers = Vec::new();
    for tap in &taps {
        let (gmm, _) = fit_router(cfg, &model, &ds.train, tap, k)?;
        let tap_index = model.network.arch.tap_index(tap)?;
        let assignments = gmm.assign_all(&feature_matrix(&model, tap_index, &ds.train)?)?;
        let report = analysis::layer_report(tap, &assignments, k, &landmarks, &attributes)?;
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(report.clusters[c].size));
        let grid = analysis::mean_cluster_images(&crop_refs, &assignments, &order, k.min(8))?;
        save_png(run, &format!("analysis/cluster_means_{tap}.png"), &grid)?;
        let mut tsv = String::from("cluster\tsize");
        for r in ROLES.iter().take(report.mu_p.len()) {
            let _ = write!(tsv, "\tlambda_{r}");
        }
        tsv.push('\n');
        for (c, cl) in report.clusters.iter().enumerate() {
            let _ = write!(tsv, "{c}\t{}", cl.size);
            for v in &cl.landmark_variance {
                let _ = write!(tsv, "\t{v:.8}");
            }
            tsv.push('\n');
        }
        write(run, &format!("analysis/clusters_{tap}.tsv"), tsv)?;
        info!("analysis {tap}: mean landmark variance {:.6}", report.mean_landmark_variance());
        layers.push(report);
    }
    let mut lv = String::from("tap\tlandmark\tmu_p\tse_p\n");
    let mut av = String::from("tap\tattribute\tmu_a\tse_a\n");
    let mut cs = String::from("tap\tk\tmedian\tsd\n");
    for l in &layers {
        for (j, (m, s)) in l.mu_p.iter().zip(&l.se_p).enumerate() {
            let _ = writeln!(lv, "{}\t{}\t{m:.8}\t{s:.8}", l.tap, ROLES.get(j).copied().unwrap_or("?"));
        }
        if let (Some(ma), Some(sa)) = (&l.mu_a, &l.se_a) {
            for (a, (m, s)) in ma.iter().zip(sa).enumerate() {
                let _ = writeln!(av, "{}\t{}\t{m:.8}\t{s:.8}", l.tap, ATTRIBUTES[a]);
            }
        }
        let _ = writeln!(cs, "{}\t{k}\t{:.1}\t{:.1}", l.tap, l.sizes.median, l.sizes.sd);
    }
    write(run, "analysis/landmark_variance.tsv", lv)?;
    write(run, "analysis/attribute_variance.tsv", av)?;
    write(run, "analysis/cluster_sizes.tsv", cs)?;
    let m = layers.first().map_or(0, |l| l.mu_p.len());
    let series: Vec<Vec<(f64, f64)>> =
        (0..m).map(|j| layers.iter().enumerate().map(|(i, l)| (i as f64, l.mu_p[j])).collect()).collect();
    save_png(run, "analysis/landmark_variance.png", &plot::line_chart(&series, 360, 240))?;
    let summary = AnalysisSummary { k, layers };
    write_json(run, "analysis/summary.json", &summary)?;
    Ok(summary)
}

pub const ATTRIBUTES: [&str; 3] = ["male", "smiling", "eyeglasses"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionProbe {
    pub cluster: usize,
    pub same: AugmentStats,
    pub cross: AugmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweakSummary {
    pub k: usize,
    pub heads: Vec<HeadReport>,
    pub probes: Vec<RejectionProbe>,
    /// Pooled same-cluster rejection rate of the probe.
    pub same_rejection: f64,
    pub cross_rejection: f64,
    /// The trunk inside the tweaked model serializes to the vanilla bytes.
    pub trunk_identical: bool,
}

fn pooled(stats: impl Iterator<Item = AugmentStats>) -> f64 {
    let (a, r) = stats.fold((0, 0), |(a, r), s| (a + s.attempted, r + s.rejected));
    if a == 0 {
        f64::NAN
    } else {
        r as f64 / a as f64
    }
}

/// Same- versus cross-cluster rejection rates of warped candidates.
pub fn rejection_probe(
    cfg: &RunConfig,
    model: &NetworkModel<f64>,
    router: &GmmModel<f64>,
    train: &[Sample<f64>],
    assignments: &[usize],
) -> Result<Vec<RejectionProbe>> {
    let n = cfg.tweak.rejection_probe;
    if n == 0 {
        return Ok(Vec::new());
    }
    let r = Router { trunk: &model.network, tap_index: model.network.arch.tap_index(&router.tap)?, gmm: router };
    let mut out = Vec::new();
    for c in 0..router.components() {
        let members: Vec<&Sample<f64>> = train.iter().zip(assignments).filter(|(_, &a)| a == c).map(|(s, _)| s).collect();
        let outsiders: Vec<&Sample<f64>> = train.iter().zip(assignments).filter(|(_, &a)| a != c).map(|(s, _)| s).collect();
        if members.len() < 2 || outsiders.is_empty() {
            continue;
        }
        let same = same_cluster_rejection(&r, c, &members, n, &mut rng::stream(cfg.seed, &format!("augment/probe/{c}/same")))?;
        let cross =
            cross_cluster_rejection(&r, c, &members, &outsiders, n, &mut rng::stream(cfg.seed, &format!("augment/probe/{c}/cross")))?;
        out.push(RejectionProbe { cluster: c, same, cross });
    }
    Ok(out)
}

/// Builds the tweaked model over the clustered router; writes `tweak/`.
pub fn stage_tweak(cfg: &RunConfig, run: &Path) -> Result<TweakSummary> {
    let model = load_vanilla(run)?;
    let router = GmmModel::load(&require(run, ROUTER, "cluster")?)?;
    let data = load_data(cfg, run)?;
    let before = model.to_container().to_bytes()?;
    let build = build_tweaked_with_router(&model, router, &data.dataset.train, &cfg.tweak_config(), &cfg.train_config())?;
    let tweaked = build.model;
    let trunk_identical = tweaked.trunk.to_container().to_bytes()? == before && model.to_container().to_bytes()? == before;
    tweaked.save(&run.join(TWEAKED))?;
    let probes = rejection_probe(cfg, &model, &tweaked.router, &data.dataset.train, &build.assignments)?;
    let mut aug = String::from("cluster\tmembers\ttrain_samples\tvalidation_samples\tfallback\tattempted\taccepted\trejected\trejection_rate\tshortfall\n");
    for h in &tweaked.reports {
        let s = h.augment.unwrap_or_default();
        let _ = writeln!(
            aug,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{}",
            h.cluster,
            h.members,
            h.train_samples,
            h.validation_samples,
            h.fallback,
            s.attempted,
            s.accepted,
            s.rejected,
            s.rejection_rate(),
            s.shortfall
        );
    }
    write(run, "tweak/augment.tsv", aug)?;
    let mut rej = String::from("cluster\tsame_attempted\tsame_rejected\tsame_rate\tcross_attempted\tcross_rejected\tcross_rate\n");
    for p in &probes {
        let _ = writeln!(
            rej,
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}",
            p.cluster,
            p.same.attempted,
            p.same.rejected,
            p.same.rejection_rate(),
            p.cross.attempted,
            p.cross.rejected,
            p.cross.rejection_rate()
        );
    }
    write(run, "tweak/rejection.tsv", rej)?;
    let summary = TweakSummary {
        k: tweaked.k(),
        heads: tweaked.reports.clone(),
        same_rejection: pooled(probes.iter().map(|p| p.same)),
        cross_rejection: pooled(probes.iter().map(|p| p.cross)),
        probes,
        trunk_identical,
    };
    write_json(run, "tweak/summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComparison {
    pub cluster: usize,
    pub samples: usize,
    pub vanilla: f64,
    pub tweaked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub vanilla: ErrorSummary,
    pub tweaked: ErrorSummary,
    /// Tweaked model with mirror-averaged prediction.
    pub tweaked_mirror: Option<ErrorSummary>,
    pub clusters: Vec<ClusterComparison>,
    /// Clusters (with validation samples) where the tweaked error is at most the vanilla one.
    pub clusters_not_worse: usize,
    /// Validation samples whose mirror-averaged error exceeds both single-orientation errors.
    pub mirror_violations: usize,
}

pub struct Evaluation {
    pub vanilla: Vec<f64>,
    pub tweaked: Vec<f64>,
    pub mirror: Option<Vec<f64>>,
    pub flipped: Option<Vec<f64>>,
    pub routes: Vec<usize>,
}

/// Per-sample errors of the vanilla and tweaked models on `samples`.
pub fn evaluate(vanilla: &NetworkModel<f64>, tweaked: &TweakedModel<f64>, samples: &[Sample<f64>], mirror: bool) -> Result<Evaluation> {
    use rayon::prelude::*;
    let v = errors_of(&vanilla_predictions(vanilla, samples)?, samples)?;
    let routed: Vec<(usize, LandmarkSet<f64>)> = samples.par_iter().map(|s| tweaked.route_and_predict(s)).collect::<Result<_>>()?;
    let (routes, preds): (Vec<usize>, Vec<LandmarkSet<f64>>) = routed.into_iter().unzip();
    let t = errors_of(&preds, samples)?;
    let (mirror, flipped) = if mirror {
        let flipped: Vec<LandmarkSet<f64>> = samples
            .par_iter()
            .map(|s| {
                let fs = crate::dataio::mirror_sample(s)?;
                tweaked.route_and_predict(&fs)?.1.mirrored()
            })
            .collect::<Result<_>>()?;
        let avg: Vec<LandmarkSet<f64>> = preds.iter().zip(&flipped).map(|(a, b)| a.mean_with(b)).collect();
        (Some(errors_of(&avg, samples)?), Some(errors_of(&flipped, samples)?))
    } else {
        (None, None)
    };
    Ok(Evaluation { vanilla: v, tweaked: t, mirror, flipped, routes })
}

fn compare_clusters(ev: &Evaluation, k: usize) -> Vec<ClusterComparison> {
    (0..k)
        .filter_map(|c| {
            let idx: Vec<usize> = (0..ev.routes.len()).filter(|&i| ev.routes[i] == c).collect();
            (!idx.is_empty()).then(|| ClusterComparison {
                cluster: c,
                samples: idx.len(),
                vanilla: mean(&idx.iter().map(|&i| ev.vanilla[i]).collect::<Vec<_>>()),
                tweaked: mean(&idx.iter().map(|&i| ev.tweaked[i]).collect::<Vec<_>>()),
            })
        })
        .collect()
}

fn with_failures(errors: &[f64], failures: usize) -> Vec<f64> {
    errors.iter().copied().chain(std::iter::repeat_n(f64::INFINITY, failures)).collect()
}

/// Compares vanilla and tweaked models on the validation split; writes `eval/`.
pub fn stage_eval(cfg: &RunConfig, run: &Path) -> Result<EvalSummary> {
    let vanilla = load_vanilla(run)?;
    require(run, ROUTER, "cluster")?;
    let tweaked = TweakedModel::<f64>::load(&require(run, &format!("{TWEAKED}/manifest.json"), "tweak").map(|p| p.parent().unwrap().to_path_buf())?)?;
    let data = load_data(cfg, run)?;
    let val = &data.dataset.validation;
    let ev = evaluate(&vanilla, &tweaked, val, cfg.eval.mirror)?;
    let mut tsv = String::from("id\tcluster\tvanilla\ttweaked\ttweaked_mirror\n");
    for (i, s) in val.iter().enumerate() {
        let mirror = ev.mirror.as_ref().map_or("-".to_string(), |m| format!("{:.6}", m[i]));
        let _ = writeln!(tsv, "{}\t{}\t{:.6}\t{:.6}\t{mirror}", s.id, ev.routes[i], ev.vanilla[i], ev.tweaked[i]);
    }
    write(run, "eval/errors.tsv", tsv)?;
    let clusters = compare_clusters(&ev, tweaked.k());
    let mut pc = String::from("cluster\tsamples\tvanilla\ttweaked\n");
    for c in &clusters {
        let _ = writeln!(pc, "{}\t{}\t{:.6}\t{:.6}", c.cluster, c.samples, c.vanilla, c.tweaked);
    }
    write(run, "eval/per_cluster.tsv", pc)?;
    let bars: Vec<Vec<f64>> = clusters.iter().map(|c| vec![c.vanilla, c.tweaked]).collect();
    save_png(run, "eval/per_cluster.png", &plot::bar_chart(&bars, 480, 240))?;
    let th = analysis::thresholds(cfg.eval.max_threshold, cfg.eval.threshold_step);
    let fails = data.failures;
    let mut curves = vec![
        analysis::cumulative_error_curve(&with_failures(&ev.vanilla, fails), &th)?,
        analysis::cumulative_error_curve(&with_failures(&ev.tweaked, fails), &th)?,
    ];
    if let Some(m) = &ev.mirror {
        curves.push(analysis::cumulative_error_curve(&with_failures(m, fails), &th)?);
    }
    let mut ct = String::from("threshold\tvanilla\ttweaked");
    ct.push_str(if ev.mirror.is_some() { "\ttweaked_mirror\n" } else { "\n" });
    for (i, t) in th.iter().enumerate() {
        let _ = write!(ct, "{t:.2}");
        for c in &curves {
            let _ = write!(ct, "\t{:.6}", c[i]);
        }
        ct.push('\n');
    }
    write(run, "eval/curves.tsv", ct)?;
    let series: Vec<Vec<(f64, f64)>> = curves.iter().map(|c| th.iter().copied().zip(c.iter().copied()).collect()).collect();
    save_png(run, "eval/curves.png", &plot::line_chart(&series, 360, 240))?;
    let mirror_violations = match (&ev.mirror, &ev.flipped) {
        (Some(m), Some(f)) => (0..m.len()).filter(|&i| m[i] > ev.tweaked[i].max(f[i]) + 1e-9).count(),
        _ => 0,
    };
    let summary = EvalSummary {
        vanilla: analysis::summarize_errors(&with_failures(&ev.vanilla, fails)),
        tweaked: analysis::summarize_errors(&with_failures(&ev.tweaked, fails)),
        tweaked_mirror: ev.mirror.as_ref().map(|m| analysis::summarize_errors(&with_failures(m, fails))),
        clusters_not_worse: clusters.iter().filter(|c| c.tweaked <= c.vanilla).count(),
        clusters,
        mirror_violations,
    };
    write_json(run, EVAL_SUMMARY, &summary)?;
    info!("eval: vanilla {:.3}%, tweaked {:.3}%", summary.vanilla.mean, summary.tweaked.mean);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_error: f64,
    pub total_epochs: usize,
    pub mean_epochs_per_head: f64,
    pub fallback_heads: usize,
}

/// Tweaks and evaluates once per `K` in the sweep list; writes `sweepk/`.
pub fn stage_sweepk(cfg: &RunConfig, run: &Path) -> Result<Vec<SweepRow>> {
    let vanilla = load_vanilla(run)?;
    let data = load_data(cfg, run)?;
    let ds = &data.dataset;
    let mut rows = Vec::new();
    for &k in &cfg.sweep.ks {
        let (router, _) = fit_router(cfg, &vanilla, &ds.train, &cfg.cluster.tap, k)?;
        let build = build_tweaked_with_router(&vanilla, router, &ds.train, &cfg.tweak_config(), &cfg.train_config())?;
        let ev = evaluate(&vanilla, &build.model, &ds.validation, false)?;
        let total_epochs: usize = build.model.reports.iter().map(HeadReport::epochs).sum();
        let row = SweepRow {
            k,
            mean_error: mean(&ev.tweaked),
            total_epochs,
            mean_epochs_per_head: total_epochs as f64 / k as f64,
            fallback_heads: build.model.reports.iter().filter(|h| h.fallback).count(),
        };
        info!("sweep K={k}: mean error {:.3}%", row.mean_error);
        rows.push(row);
    }
    let mut tsv = String::from("k\tmean_error\ttotal_epochs\tmean_epochs_per_head\tfallback_heads\n");
    for r in &rows {
        let _ = writeln!(tsv, "{}\t{:.6}\t{}\t{:.2}\t{}", r.k, r.mean_error, r.total_epochs, r.mean_epochs_per_head, r.fallback_heads);
    }
    write(run, "sweepk/sweepk.tsv", tsv)?;
    write_json(run, "sweepk/summary.json", &rows)?;
    let series = vec![rows.iter().map(|r| (r.k as f64, r.mean_error)).collect()];
    save_png(run, "sweepk/sweepk.png", &plot::line_chart(&series, 360, 240))?;
    Ok(rows)
}

/// Landmark predictions for images described by an annotation file, or for
/// a single image taken whole as the face box. `None` marks a detector failure.
pub fn predict_paths(
    input: &Path,
    vanilla: &NetworkModel<f64>,
    tweaked: Option<&TweakedModel<f64>>,
    mirror: bool,
) -> Result<Vec<(String, Option<LandmarkSet<f64>>)>> {
    let stats: &NormalizationStats<f64> = &vanilla.stats;
    let run_one = |name: String, img: &image::RgbImage, bbox: [f64; 4]| -> Result<(String, Option<LandmarkSet<f64>>)> {
        let pixels = raster::crop_resize(img, bbox, CROP);
        let m = vanilla.landmark_count();
        let sample = Sample {
            id: name.clone(),
            image: stats.normalize(&pixels)?,
            landmarks: LandmarkSet::new(vec![[0.0, 0.0]; m]),
            attributes: None,
        };
        let p = match tweaked {
            Some(t) => t.predict(&sample, mirror)?,
            None => vanilla.predict(&sample)?,
        };
        Ok((name, Some(p)))
    };
    let is_image = matches!(
        input.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png")
    );
    if is_image {
        let img = image::open(input)?.to_rgb8();
        let bbox = [0.0, 0.0, img.width() as f64, img.height() as f64];
        return Ok(vec![run_one(input.display().to_string(), &img, bbox)?]);
    }
    let records = crate::dataio::parse_annotations(&fs::read_to_string(input)?)?;
    let root = input.parent().map(Path::to_path_buf).unwrap_or_default();
    records
        .iter()
        .map(|rec| match rec.bbox {
            None => Ok((rec.path.clone(), None)),
            Some(b) => {
                let img = image::open(root.join(&rec.path))?.to_rgb8();
                run_one(rec.path.clone(), &img, b)
            }
        })
        .collect()
}

/// `path x1 y1 … xm ym`, box-normalized; detector failures print `nan`.
pub fn format_predictions(preds: &[(String, Option<LandmarkSet<f64>>)], m: usize) -> String {
    let mut out = String::new();
    for (path, p) in preds {
        out.push_str(path);
        match p {
            Some(p) => {
                for q in &p.points {
                    let _ = write!(out, " {:.6} {:.6}", q[0], q[1]);
                }
            }
            None => out.push_str(&" nan".repeat(2 * m)),
        }
        out.push('\n');
    }
    out
}

/// Parses [`format_predictions`] output.
pub fn parse_predictions(text: &str) -> Result<Vec<(String, Option<LandmarkSet<f64>>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            let path = parts.next().unwrap_or_default().to_string();
            let vals: Vec<f64> = parts
                .map(|v| v.parse::<f64>().map_err(|_| Error::Annotation { line: i + 1, msg: format!("bad number `{v}`") }))
                .collect::<Result<_>>()?;
            if vals.is_empty() || vals.len() % 2 != 0 {
                return Err(Error::Annotation { line: i + 1, msg: "expected x y pairs after the path".into() });
            }
            if vals.iter().all(|v| v.is_nan()) {
                return Ok((path, None));
            }
            Ok((path, Some(LandmarkSet::from_flat(&vals)?)))
        })
        .collect()
}

/// Errors of a prediction file against an annotation file, matched by path.
/// Failures on either side count as infinite error.
pub fn score_predictions(predictions: &Path, annotations: &Path) -> Result<Vec<(String, f64)>> {
    let preds = parse_predictions(&fs::read_to_string(predictions)?)?;
    let truth = crate::dataio::parse_annotations(&fs::read_to_string(annotations)?)?;
    preds
        .iter()
        .map(|(path, p)| {
            let rec = truth
                .iter()
                .find(|r| &r.path == path)
                .ok_or_else(|| Error::Config(format!("{path} has no ground truth in {}", annotations.display())))?;
            let err = match (p, rec.bbox) {
                (Some(p), Some(b)) => {
                    let t = LandmarkSet::new(rec.landmarks.iter().map(|&q| crate::dataio::normalize_point(q, b)).collect());
                    analysis::error_rate(p, &t)?
                }
                _ => f64::INFINITY,
            };
            Ok((path.clone(), err))
        })
        .collect()
}
