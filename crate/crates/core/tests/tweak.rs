mod common;

use tcnn::augment::AugmentConfig;
use tcnn::dataio::{mirror_sample, Dataset};
use tcnn::model::{train_vanilla, NetworkModel, TrainConfig};
use tcnn::network::Architecture;
use tcnn::tweak::{build_tweaked, TweakConfig, TweakedModel};

fn vanilla(seed: u64) -> (Dataset<f64>, NetworkModel<f64>, TrainConfig) {
    let data = common::synthetic_dataset(132, 3, seed);
    let cfg = TrainConfig { epochs: 2, seed, ..TrainConfig::default() };
    let (model, _) = train_vanilla(&data, &Architecture::default_for(5), &cfg).unwrap();
    (data, model, cfg)
}

fn quick(k: usize, seed: u64) -> TweakConfig {
    TweakConfig { k, epochs: 3, patience: 2, augment: Some(AugmentConfig { target: 40, retry_factor: 5 }), seed, ..TweakConfig::default() }
}

#[test]
fn single_cluster_without_training_equals_vanilla() {
    let (data, model, base) = vanilla(1);
    let cfg = TweakConfig { k: 1, patience: 0, augment: None, seed: 1, ..TweakConfig::default() };
    let tweaked = build_tweaked(&model, "FC5", &data.train, &cfg, &base).unwrap().model;
    for s in data.validation.iter().chain(&data.train) {
        assert_eq!(tweaked.route(s).unwrap(), 0);
        assert_eq!(tweaked.predict(s, false).unwrap(), model.predict(s).unwrap());
    }
}

#[test]
fn trunk_is_untouched_and_routing_is_stable() {
    let (data, model, base) = vanilla(2);
    let before = model.to_container().to_bytes().unwrap();
    let build = build_tweaked(&model, "FC5", &data.train, &quick(3, 2), &base).unwrap();
    assert_eq!(build.model.trunk.to_container().to_bytes().unwrap(), before);
    assert_eq!(model.to_container().to_bytes().unwrap(), before);
    for (s, &a) in data.train.iter().zip(&build.assignments) {
        assert_eq!(build.model.route(s).unwrap(), a);
        assert_eq!(build.model.route(s).unwrap(), a);
    }
    for r in &build.model.reports {
        if let Some(log) = &r.log {
            assert!(log.last_epoch() - log.best_epoch <= 2);
            assert!(log.best_val_loss <= log.records[0].val_loss);
        }
    }
}

#[test]
fn save_load_roundtrip_predicts_identically() {
    let (data, model, base) = vanilla(3);
    let tweaked = build_tweaked(&model, "FC5", &data.train, &quick(2, 3), &base).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    tweaked.save(dir.path()).unwrap();
    let back = TweakedModel::<f64>::load(dir.path()).unwrap();
    for s in &data.validation {
        assert_eq!(back.route_and_predict(s).unwrap(), tweaked.route_and_predict(s).unwrap());
        assert_eq!(back.predict(s, true).unwrap(), tweaked.predict(s, true).unwrap());
    }
}

#[test]
fn tampered_trunk_is_rejected() {
    let (data, model, base) = vanilla(4);
    let cfg = TweakConfig { k: 1, patience: 0, augment: None, ..TweakConfig::default() };
    let tweaked = build_tweaked(&model, "FC5", &data.train, &cfg, &base).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    tweaked.save(dir.path()).unwrap();
    let path = dir.path().join("trunk.tcnn");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(TweakedModel::<f64>::load(dir.path()).is_err());
}

#[test]
fn mirror_average_is_midpoint_of_both_orientations() {
    let (data, model, base) = vanilla(5);
    let tweaked = build_tweaked(&model, "FC5", &data.train, &quick(2, 5), &base).unwrap().model;
    for s in data.validation.iter().take(5) {
        let direct = tweaked.predict(s, false).unwrap();
        let flipped = tweaked.predict(&mirror_sample(s).unwrap(), false).unwrap().mirrored().unwrap();
        let avg = tweaked.predict(s, true).unwrap();
        for ((a, b), m) in direct.points.iter().zip(&flipped.points).zip(&avg.points) {
            for d in 0..2 {
                assert!((m[d] - 0.5 * (a[d] + b[d])).abs() < 1e-12);
            }
        }
    }
}
