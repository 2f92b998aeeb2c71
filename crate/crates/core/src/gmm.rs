//! Diagonal-covariance Gaussian mixtures fitted by EM, and posterior-argmax
//! cluster assignment.

use std::path::Path;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{log_sum_exp, CompensatedSum, Scalar};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `n × d` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    n: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        let mut d = None;
        let mut n = 0;
        for row in rows {
            match d {
                None => d = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Shape(format!("feature row of length {} among rows of {d}", row.len())))
                }
                _ => {}
            }
            data.extend_from_slice(row);
            n += 1;
        }
        let d = d.unwrap_or(0);
        Ok(Self { n, d, data })
    }

    pub fn from_tensors(rows: &[Tensor<T>]) -> Result<Self> {
        Self::from_rows(rows.iter().map(|t| t.data()))
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<T> {
    pub weights: Vec<T>,
    /// `[K, d]`
    pub means: Tensor<T>,
    /// `[K, d]`, every entry at least the variance floor.
    pub variances: Tensor<T>,
    /// Feature tap the mixture was fitted on.
    pub tap: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iterations: usize,
    /// Stop when the relative log-likelihood change falls below this.
    pub tolerance: f64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iterations: 300, tolerance: 1e-7, variance_floor: VARIANCE_FLOOR }
    }
}

/// A component whose weight fell below `1e-6 / K` and was re-seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReseedEvent {
    pub iteration: usize,
    pub component: usize,
    /// Data point whose coordinates became the new mean.
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit<T> {
    pub model: GmmModel<T>,
    /// Total log-likelihood at each E-step.
    pub trace: Vec<f64>,
    pub reseeds: Vec<ReseedEvent>,
    pub converged: bool,
}

impl<T: Scalar> GmmModel<T> {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    fn mean(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.means.data()[k * d..(k + 1) * d]
    }

    fn variance(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.variances.data()[k * d..(k + 1) * d]
    }

    /// `log w_k + log N(x | μ_k, diag σ²_k)` for every component.
    pub fn component_log_densities(&self, x: &[T]) -> Vec<T> {
        Prepared::new(self).log_densities(self, x)
    }

    /// Posterior `p(C_k | x)` computed in log space, plus `log p(x)`.
    pub fn posterior(&self, x: &[T]) -> (Vec<T>, T) {
        posterior_from_log(&self.component_log_densities(x))
    }

    /// Highest-posterior component (lowest index on ties) and the posterior vector.
    pub fn assign(&self, x: &[T]) -> Result<(usize, Vec<T>)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for a {}-dimensional mixture",
                x.len(),
                self.dim()
            )));
        }
        let (post, _) = self.posterior(x);
        Ok((argmax(&post), post))
    }

    pub fn assign_all(&self, features: &FeatureMatrix<T>) -> Result<Vec<usize>> {
        if features.dim() != self.dim() {
            return Err(Error::Shape(format!("{}-d features for a {}-d mixture", features.dim(), self.dim())));
        }
        let prep = Prepared::new(self);
        Ok((0..features.rows())
            .into_par_iter()
            .map(|i| argmax(&prep.log_densities(self, features.row(i))))
            .collect())
    }

    pub fn log_likelihood(&self, features: &FeatureMatrix<T>) -> f64 {
        let prep = Prepared::new(self);
        let per: Vec<T> = (0..features.rows())
            .into_par_iter()
            .map(|i| log_sum_exp(&prep.log_densities(self, features.row(i))))
            .collect();
        per.into_iter().collect::<CompensatedSum<T>>().value().as_f64()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "gmm",
            serde_json::json!({ "components": self.components(), "dim": self.dim(), "tap": self.tap }),
        );
        c.push("weights", &Tensor::vector(self.weights.clone()));
        c.push("means", &self.means);
        c.push("variances", &self.variances);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("gmm")?;
        let tap = c.meta.get("tap").and_then(|v| v.as_str()).unwrap_or("").to_string();
        let weights = c.get::<T>("weights")?.into_data();
        let means: Tensor<T> = c.get("means")?;
        let variances: Tensor<T> = c.get("variances")?;
        if means.shape().len() != 2 || means.shape()[0] != weights.len() || variances.shape() != means.shape() {
            return Err(Error::Format("inconsistent mixture tensor shapes".into()));
        }
        Ok(Self { weights, means, variances, tap })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Per-component constants of the log density: `log w_k − ½ Σ_j ln(2πσ²_kj)`
/// and `1/σ²_kj`.
struct Prepared<T> {
    log_norm: Vec<T>,
    inv_var: Vec<T>,
}

impl<T: Scalar> Prepared<T> {
    fn new(m: &GmmModel<T>) -> Self {
        let ln2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        let log_norm = (0..m.components())
            .map(|k| {
                let s: T = m.variance(k).iter().map(|&v| ln2pi + v.ln()).collect::<CompensatedSum<T>>().value();
                m.weights[k].ln() - T::lit(0.5) * s
            })
            .collect();
        let inv_var = m.variances.data().iter().map(|&v| T::one() / v).collect();
        Self { log_norm, inv_var }
    }

    fn log_densities(&self, m: &GmmModel<T>, x: &[T]) -> Vec<T> {
        let d = m.dim();
        (0..m.components())
            .map(|k| {
                let mut acc = T::zero();
                for ((&xi, &mi), &iv) in x.iter().zip(m.mean(k)).zip(&self.inv_var[k * d..(k + 1) * d]) {
                    let diff = xi - mi;
                    acc += diff * diff * iv;
                }
                self.log_norm[k] - T::lit(0.5) * acc
            })
            .collect()
    }
}

/// Normalizes per-component log densities into a posterior; also returns their log-sum-exp.
pub fn posterior_from_log<T: Scalar>(logp: &[T]) -> (Vec<T>, T) {
    let lse = log_sum_exp(logp);
    (logp.iter().map(|&l| (l - lse).exp()).collect(), lse)
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn global_variance<T: Scalar>(x: &FeatureMatrix<T>, floor: T) -> Vec<T> {
    let n = T::from_usize_lossy(x.rows());
    let mut out = Vec::with_capacity(x.dim());
    for j in 0..x.dim() {
        let mean = (0..x.rows()).map(|i| x.row(i)[j]).collect::<CompensatedSum<T>>().value() / n;
        let var = (0..x.rows())
            .map(|i| (x.row(i)[j] - mean).powi(2))
            .collect::<CompensatedSum<T>>()
            .value()
            / n;
        out.push(var.max(floor));
    }
    out
}

/// k-means++ seeding of means, uniform weights, global per-dimension variance.
pub fn initialize<T: Scalar, R: Rng>(x: &FeatureMatrix<T>, k: usize, floor: T, rng: &mut R) -> GmmModel<T> {
    let (n, d) = (x.rows(), x.dim());
    let mut centers = vec![rng.random_range(0..n)];
    let mut dist: Vec<T> = (0..n).map(|i| sq_dist(x.row(i), x.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().map(|v| v.as_f64()).sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, v) in dist.iter().enumerate() {
                r -= v.as_f64();
                if r < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(pick);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    let mut means = Vec::with_capacity(k * d);
    for &c in &centers {
        means.extend_from_slice(x.row(c));
    }
    let var = global_variance(x, floor);
    let variances: Vec<T> = (0..k).flat_map(|_| var.iter().copied()).collect();
    GmmModel {
        weights: vec![T::one() / T::from_usize_lossy(k); k],
        means: Tensor::from_vec(&[k, d], means).expect("k·d means"),
        variances: Tensor::from_vec(&[k, d], variances).expect("k·d variances"),
        tap: String::new(),
    }
}

/// E-step: responsibilities (row-major `n × K`) and total log-likelihood.
pub fn responsibilities<T: Scalar>(model: &GmmModel<T>, x: &FeatureMatrix<T>) -> (Vec<T>, f64) {
    let prep = Prepared::new(model);
    let per: Vec<(Vec<T>, T)> =
        (0..x.rows()).into_par_iter().map(|i| posterior_from_log(&prep.log_densities(model, x.row(i)))).collect();
    let mut ll = CompensatedSum::new();
    let mut resp = Vec::with_capacity(x.rows() * model.components());
    for (r, l) in per {
        ll.add(l);
        resp.extend(r);
    }
    (resp, ll.value().as_f64())
}

fn m_step<T: Scalar>(x: &FeatureMatrix<T>, resp: &[T], k: usize, floor: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, d) = (x.rows(), x.dim());
    let mut nk: Vec<CompensatedSum<T>> = vec![CompensatedSum::new(); k];
    let mut sums: Vec<CompensatedSum<T>> = vec![CompensatedSum::new(); k * d];
    for i in 0..n {
        let row = x.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            nk[c].add(r);
            if r == T::zero() {
                continue;
            }
            for (s, &xv) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                s.add(r * xv);
            }
        }
    }
    let nk: Vec<T> = nk.iter().map(CompensatedSum::value).collect();
    let means: Vec<T> = (0..k * d)
        .map(|idx| if nk[idx / d] > T::zero() { sums[idx].value() / nk[idx / d] } else { T::zero() })
        .collect();
    let mut sq: Vec<CompensatedSum<T>> = vec![CompensatedSum::new(); k * d];
    for i in 0..n {
        let row = x.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            if r == T::zero() {
                continue;
            }
            for ((s, &xv), &m) in sq[c * d..(c + 1) * d].iter_mut().zip(row).zip(&means[c * d..(c + 1) * d]) {
                s.add(r * (xv - m) * (xv - m));
            }
        }
    }
    let vars: Vec<T> = (0..k * d)
        .map(|idx| if nk[idx / d] > T::zero() { (sq[idx].value() / nk[idx / d]).max(floor) } else { floor })
        .collect();
    let total = T::from_usize_lossy(n);
    (nk.iter().map(|&w| w / total).collect(), means, vars)
}

/// Runs EM from a given initial model.
pub fn fit_from<T: Scalar>(x: &FeatureMatrix<T>, init: GmmModel<T>, cfg: &GmmConfig) -> Result<GmmFit<T>> {
    let k = init.components();
    if x.rows() < k {
        return Err(Error::NotEnoughSamples { needed: k, got: x.rows() });
    }
    if x.dim() != init.dim() {
        return Err(Error::Shape(format!("{}-d features for a {}-d mixture", x.dim(), init.dim())));
    }
    let floor = T::lit(cfg.variance_floor);
    let d = x.dim();
    let mut model = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeds = Vec::new();
    let mut converged = false;
    let global_var = global_variance(x, floor);
    for it in 0..cfg.max_iterations.max(1) {
        let (resp, ll) = responsibilities(&model, x);
        if !ll.is_finite() {
            return Err(Error::Degenerate(format!("non-finite log-likelihood at EM iteration {it}")));
        }
        if let Some(&prev) = trace.last() {
            if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tolerance {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if it + 1 == cfg.max_iterations {
            break;
        }
        let (weights, means, vars) = m_step(x, &resp, k, floor);
        model.weights = weights;
        model.means = Tensor::from_vec(&[k, d], means)?;
        model.variances = Tensor::from_vec(&[k, d], vars)?;
        let collapse = T::lit(1e-6) / T::from_usize_lossy(k);
        for c in 0..k {
            if model.weights[c] >= collapse {
                continue;
            }
            let point = (0..x.rows())
                .map(|i| {
                    let nearest = (0..k)
                        .filter(|&o| o != c)
                        .map(|o| sq_dist(x.row(i), model.mean(o)))
                        .fold(T::infinity(), T::min);
                    (i, nearest)
                })
                .fold((0, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            warn!("EM iteration {it}: component {c} collapsed, re-seeded at point {point}");
            reseeds.push(ReseedEvent { iteration: it, component: c, point });
            model.means.data_mut()[c * d..(c + 1) * d].copy_from_slice(x.row(point));
            model.variances.data_mut()[c * d..(c + 1) * d].copy_from_slice(&global_var);
            model.weights[c] = T::one() / T::from_usize_lossy(k);
            let s: T = model.weights.iter().copied().sum();
            model.weights.iter_mut().for_each(|w| *w /= s);
        }
    }
    Ok(GmmFit { model, trace, reseeds, converged })
}

/// Fits a `K`-component diagonal mixture with EM.
pub fn fit<T: Scalar>(x: &FeatureMatrix<T>, k: usize, seed: u64, cfg: &GmmConfig) -> Result<GmmFit<T>> {
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if x.rows() < k {
        return Err(Error::NotEnoughSamples { needed: k, got: x.rows() });
    }
    if x.dim() == 0 {
        return Err(Error::Shape("zero-dimensional features".into()));
    }
    let mut rng = rng::stream(seed, "cluster");
    let init = initialize(x, k, T::lit(cfg.variance_floor), &mut rng);
    let fit = fit_from(x, init, cfg)?;
    info!(
        "GMM K={k} d={}: {} EM iterations, converged={}, log-likelihood {:.4}",
        x.dim(),
        fit.trace.len(),
        fit.converged,
        fit.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(fit)
}
