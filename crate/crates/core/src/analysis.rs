//! Cluster diagnostics and error metrics: principal-axis landmark variance,
//! attribute variance, cluster-size statistics, error rates and cumulative
//! error curves, and cluster-mean images.
//!
//! All variances use the population (divide-by-n) form. Landmark variances
//! are in box-normalized coordinates.

use image::RgbImage;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::model::MIN_INTER_OCULAR;
use crate::raster;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest eigenvalue of the 2×2 population covariance of `points`.
pub fn principal_axis_variance<T: Scalar>(points: &[[T; 2]]) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let n = T::from_usize_lossy(points.len());
    let mx = points.iter().map(|p| p[0]).sum::<T>() / n;
    let my = points.iter().map(|p| p[1]).sum::<T>() / n;
    let (mut xx, mut yy, mut xy) = (T::zero(), T::zero(), T::zero());
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        xx += dx * dx;
        yy += dy * dy;
        xy += dx * dy;
    }
    let (xx, yy, xy) = (xx / n, yy / n, xy / n);
    let half = T::lit(0.5);
    let mid = (xx + yy) * half;
    let rad = (((xx - yy) * half).powi(2) + xy * xy).sqrt();
    (mid + rad).max(T::zero())
}

/// `p(1 − p)` for the fraction `p` of ones.
pub fn attribute_variance(labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let p = labels.iter().filter(|&&l| l != 0).count() as f64 / labels.len() as f64;
    p * (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub median: f64,
    /// Population standard deviation.
    pub sd: f64,
}

/// Member counts of clusters `0..k`.
pub fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignments {
        if a < k {
            sizes[a] += 1;
        }
    }
    sizes
}

/// Median and population SD of cluster sizes, empty clusters included.
pub fn cluster_stats(sizes: &[usize]) -> SizeStats {
    if sizes.is_empty() {
        return SizeStats { median: 0.0, sd: 0.0 };
    }
    let mut s: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    SizeStats { median, sd }
}

/// Mean landmark distance as a percentage of the ground-truth inter-ocular distance.
pub fn error_rate<T: Scalar>(predicted: &LandmarkSet<T>, truth: &LandmarkSet<T>) -> Result<f64> {
    if predicted.len() != truth.len() || truth.len() < 2 {
        return Err(Error::Shape(format!("{} predicted vs {} true landmarks", predicted.len(), truth.len())));
    }
    let iod = truth.inter_ocular().as_f64();
    if !(iod >= MIN_INTER_OCULAR) {
        return Err(Error::DegenerateGroundTruth(iod));
    }
    let total: f64 = predicted
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| (p[0] - t[0]).as_f64().hypot((p[1] - t[1]).as_f64()))
        .sum();
    Ok(100.0 * total / truth.len() as f64 / iod)
}

/// Fraction of errors `≤ t` for each threshold `t`. Detector failures are
/// passed as `f64::INFINITY` and stay in the denominator.
pub fn cumulative_error_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyDataset("no errors to accumulate".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    Ok(thresholds.iter().map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub failures: usize,
    /// Mean over non-failures.
    pub mean: f64,
    pub median: f64,
}

pub fn summarize_errors(errors: &[f64]) -> ErrorSummary {
    let mut finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    finite.sort_by(|a, b| a.total_cmp(b));
    let n = finite.len();
    let mean = if n == 0 { f64::NAN } else { finite.iter().sum::<f64>() / n as f64 };
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => finite[n / 2],
        _ => 0.5 * (finite[n / 2 - 1] + finite[n / 2]),
    };
    ErrorSummary { count: errors.len(), failures: errors.len() - n, mean, median }
}

/// Evenly spaced thresholds `0, step, …, max`.
pub fn thresholds(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// Per-cluster pixel means of raw `[H, W, 3]` crops, tiled in `order`.
/// Empty clusters are rendered black.
pub fn mean_cluster_images(crops: &[&Tensor<f64>], assignments: &[usize], order: &[usize], cols: usize) -> Result<RgbImage> {
    if crops.len() != assignments.len() {
        return Err(Error::Shape(format!("{} crops vs {} assignments", crops.len(), assignments.len())));
    }
    let shape = crops.first().map(|c| c.shape().to_vec()).unwrap_or_else(|| vec![40, 40, 3]);
    let tiles = order
        .iter()
        .map(|&k| {
            let members: Vec<&Tensor<f64>> =
                crops.iter().zip(assignments).filter(|(_, &a)| a == k).map(|(c, _)| *c).collect();
            let mut acc = Tensor::<f64>::zeros(&shape);
            if members.is_empty() {
                warn!("cluster {k} is empty; its mean image is black");
            } else {
                for m in &members {
                    acc.axpy(1.0, m)?;
                }
                acc.scale(1.0 / members.len() as f64);
            }
            Ok(raster::to_image(&acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(raster::tile(&tiles, cols))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    /// Principal-axis variance per landmark; empty for an empty cluster.
    pub landmark_variance: Vec<f64>,
    /// Per-attribute variance, when every member carries attributes.
    pub attribute_variance: Option<Vec<f64>>,
}

/// Cluster statistics for one feature tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub tap: String,
    pub clusters: Vec<ClusterSummary>,
    pub sizes: SizeStats,
    /// Mean over non-empty clusters of the per-landmark principal-axis variance.
    pub mu_p: Vec<f64>,
    pub se_p: Vec<f64>,
    pub mu_a: Option<Vec<f64>>,
    pub se_a: Option<Vec<f64>>,
}

impl LayerReport {
    /// Mean of `mu_p` over landmarks.
    pub fn mean_landmark_variance(&self) -> f64 {
        self.mu_p.iter().sum::<f64>() / self.mu_p.len().max(1) as f64
    }
}

fn mean_and_se(rows: &[&Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    (0..width)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, sd / n.sqrt())
        })
        .unzip()
}

/// Builds the per-cluster and aggregate statistics of one layer's assignment.
pub fn layer_report(
    tap: &str,
    assignments: &[usize],
    k: usize,
    landmarks: &[LandmarkSet<f64>],
    attributes: &[Option<[u8; 3]>],
) -> Result<LayerReport> {
    if assignments.len() != landmarks.len() || assignments.len() != attributes.len() {
        return Err(Error::Shape("assignments, landmarks and attributes differ in length".into()));
    }
    let m = landmarks.first().map(LandmarkSet::len).unwrap_or(0);
    let with_attrs = !attributes.is_empty() && attributes.iter().all(Option::is_some);
    let clusters: Vec<ClusterSummary> = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == c).collect();
            let landmark_variance = if idx.is_empty() {
                Vec::new()
            } else {
                (0..m)
                    .map(|j| {
                        let pts: Vec<[f64; 2]> = idx.iter().map(|&i| landmarks[i].points[j]).collect();
                        principal_axis_variance(&pts)
                    })
                    .collect()
            };
            let attribute_variance = (with_attrs && !idx.is_empty()).then(|| {
                (0..3)
                    .map(|a| {
                        let labels: Vec<u8> = idx.iter().map(|&i| attributes[i].expect("checked")[a]).collect();
                        attribute_variance(&labels)
                    })
                    .collect()
            });
            ClusterSummary { size: idx.len(), landmark_variance, attribute_variance }
        })
        .collect();
    let nonempty: Vec<&ClusterSummary> = clusters.iter().filter(|c| c.size > 0).collect();
    let (mu_p, se_p) = mean_and_se(&nonempty.iter().map(|c| &c.landmark_variance).collect::<Vec<_>>(), m);
    let (mu_a, se_a) = if with_attrs {
        let rows: Vec<&Vec<f64>> = nonempty.iter().filter_map(|c| c.attribute_variance.as_ref()).collect();
        let (a, b) = mean_and_se(&rows, 3);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let sizes = cluster_stats(&clusters.iter().map(|c| c.size).collect::<Vec<_>>());
    Ok(LayerReport { tap: tap.to_string(), clusters, sizes, mu_p, se_p, mu_a, se_a })
}
