use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::landmarks::LandmarkSet;
use crate::network::{Network, CROP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::similarity::estimate_similarity;
use super::warp::warp_image;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Cluster size to reach, originals included.
    pub target: usize,
    /// Candidates tried per target sample before giving up.
    pub retry_factor: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { target: 600, retry_factor: 20 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Accepted samples still missing when the retry cap was hit.
    pub shortfall: usize,
}

impl AugmentStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.rejected as f64 / self.attempted as f64
        }
    }
}

/// Frozen trunk plus router: decides which cluster an image belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Router<'a, T> {
    pub trunk: &'a Network<T>,
    pub tap_index: usize,
    pub gmm: &'a GmmModel<T>,
}

impl<T: Scalar> Router<'_, T> {
    pub fn route(&self, image: &Tensor<T>) -> Result<usize> {
        let f = self.trunk.features_at(image, self.tap_index)?;
        Ok(self.gmm.assign(f.data())?.0)
    }
}

fn to_pixels<T: Scalar>(l: &LandmarkSet<T>) -> Vec<[T; 2]> {
    let s = T::from_usize_lossy(CROP);
    l.points.iter().map(|p| [p[0] * s, p[1] * s]).collect()
}

/// Warps `source` so that its landmarks move onto `target`'s geometry and
/// labels the result with `target`'s landmarks.
pub fn synthesize_candidate<T: Scalar>(source: &Sample<T>, target: &Sample<T>) -> Result<Sample<T>> {
    let fit = estimate_similarity(&to_pixels(&source.landmarks), &to_pixels(&target.landmarks))?;
    let image = warp_image(&source.image, &fit.transform, T::zero())?;
    Ok(Sample {
        id: format!("{}~{}", source.id, target.id),
        image,
        landmarks: target.landmarks.clone(),
        attributes: target.attributes,
    })
}

/// Draws (source, target) pairs until `needed` candidates routed to `cluster`
/// are accepted or `cap` candidates were tried. Candidates are evaluated in
/// parallel chunks but accepted in draw order.
fn generate<T: Scalar, R: Rng>(
    router: &Router<'_, T>,
    cluster: usize,
    sources: &[&Sample<T>],
    targets: &[&Sample<T>],
    needed: usize,
    cap: usize,
    rng: &mut R,
) -> Result<(Vec<Sample<T>>, AugmentStats)> {
    let mut stats = AugmentStats::default();
    let mut out = Vec::new();
    while out.len() < needed && stats.attempted < cap {
        let n = CHUNK.min(cap - stats.attempted);
        let pairs: Vec<(usize, usize)> =
            (0..n).map(|_| (rng.random_range(0..sources.len()), rng.random_range(0..targets.len()))).collect();
        let results: Vec<Option<Sample<T>>> = pairs
            .par_iter()
            .map(|&(s, t)| {
                let cand = match synthesize_candidate(sources[s], targets[t]) {
                    Ok(c) => c,
                    Err(Error::Degenerate(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                Ok((router.route(&cand.image)? == cluster).then_some(cand))
            })
            .collect::<Result<_>>()?;
        for r in results {
            if out.len() == needed {
                break;
            }
            stats.attempted += 1;
            match r {
                Some(s) => {
                    stats.accepted += 1;
                    out.push(s);
                }
                None => stats.rejected += 1,
            }
        }
    }
    stats.shortfall = needed - out.len();
    Ok((out, stats))
}

/// Inflates one cluster to `cfg.target` samples by warping members onto the
/// geometry of other members and keeping only warps that still route to
/// `cluster`. Returns the originals followed by the accepted samples.
pub fn augment_cluster<T: Scalar, R: Rng>(
    router: &Router<'_, T>,
    cluster: usize,
    members: &[&Sample<T>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<Sample<T>>, AugmentStats)> {
    if members.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: members.len() });
    }
    let needed = cfg.target.saturating_sub(members.len());
    let cap = cfg.retry_factor.saturating_mul(cfg.target);
    let (extra, stats) = generate(router, cluster, members, members, needed, cap, rng)?;
    if stats.shortfall > 0 {
        warn!("cluster {cluster}: retry cap {cap} reached, {} samples short of {}", stats.shortfall, cfg.target);
    }
    info!(
        "cluster {cluster}: {} members + {} synthesized, rejection rate {:.3}",
        members.len(),
        extra.len(),
        stats.rejection_rate()
    );
    let mut all: Vec<Sample<T>> = members.iter().map(|&s| s.clone()).collect();
    all.extend(extra);
    Ok((all, stats))
}

/// Rejection statistics for `attempts` candidates whose source image comes
/// from outside `cluster` while the target geometry comes from inside it.
pub fn cross_cluster_rejection<T: Scalar, R: Rng>(
    router: &Router<'_, T>,
    cluster: usize,
    members: &[&Sample<T>],
    outsiders: &[&Sample<T>],
    attempts: usize,
    rng: &mut R,
) -> Result<AugmentStats> {
    if members.is_empty() || outsiders.is_empty() {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    let (_, mut stats) = generate(router, cluster, outsiders, members, attempts, attempts, rng)?;
    stats.shortfall = 0;
    Ok(stats)
}

/// Same-cluster rejection statistics over exactly `attempts` candidates.
pub fn same_cluster_rejection<T: Scalar, R: Rng>(
    router: &Router<'_, T>,
    cluster: usize,
    members: &[&Sample<T>],
    attempts: usize,
    rng: &mut R,
) -> Result<AugmentStats> {
    if members.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: members.len() });
    }
    let (_, mut stats) = generate(router, cluster, members, members, attempts, attempts, rng)?;
    stats.shortfall = 0;
    Ok(stats)
}
