//! Oracle checks shared by the integration tests and the acceptance harness.
//! Each check runs a number of randomized instances against an independent
//! computation and reports its worst deviation.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use tcnn::augment::{estimate_similarity, warp_image, SimilarityTransform};
use tcnn::gmm::{self, FeatureMatrix, GmmConfig, GmmModel};
use tcnn::landmarks::LandmarkSet;
use tcnn::model::{loss, loss_and_grad};
use tcnn::network::{backward_stack, forward_stack, forward_stack_traced, init_layers, Architecture, Layer};
use tcnn::rng::{stream, StreamRng};
use tcnn::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub instances: usize,
    pub probes: usize,
    pub excluded: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, value: f64, bound: f64, what: impl FnOnce() -> String) {
        if value.is_nan() || value > self.worst {
            self.worst = value;
        }
        if !(value < bound) {
            self.failures.push(format!("{} ({value:e})", what()));
        }
    }

    fn merge(&mut self, other: Outcome) {
        self.instances += other.instances;
        self.probes += other.probes;
        self.excluded += other.excluded;
        if other.worst > self.worst {
            self.worst = other.worst;
        }
        self.failures.extend(other.failures);
    }
}

pub fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that vanishing gradients are
/// compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const KINK: f64 = 1e-3;

/// What the stack is differentiated against.
enum Objective<'a> {
    Linear(&'a Tensor<f64>),
    Landmarks(&'a LandmarkSet<f64>),
}

impl Objective<'_> {
    fn value(&self, out: &Tensor<f64>) -> f64 {
        match self {
            Objective::Linear(c) => out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum(),
            Objective::Landmarks(t) => loss_and_grad(out.data(), t).unwrap().0,
        }
    }

    fn grad(&self, out: &Tensor<f64>) -> Tensor<f64> {
        match self {
            Objective::Linear(c) => (*c).clone(),
            Objective::Landmarks(t) => Tensor::from_vec(out.shape(), loss_and_grad(out.data(), t).unwrap().1).unwrap(),
        }
    }
}

/// Piecewise-linear state of a forward pass: abstanh signs and max-pool
/// winners. A probe whose two sides differ here straddles a kink.
fn kink_pattern(layers: &[Layer<f64>], input: &Tensor<f64>) -> Vec<usize> {
    let trace = forward_stack_traced(layers, input).unwrap();
    let mut pat = Vec::new();
    for (layer, x) in layers.iter().zip(&trace.inputs) {
        match layer {
            Layer::AbsTanh => pat.extend(x.data().iter().map(|&v| usize::from(v >= 0.0))),
            Layer::MaxPool { window, stride } => {
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut y = 0;
                while y < h {
                    let mut xo = 0;
                    while xo < w {
                        for ch in 0..c {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..*window {
                                for dx in 0..*window {
                                    let (yy, xx) = (y + dy, xo + dx);
                                    if yy < h && xx < w {
                                        let v = x.at3(yy, xx, ch);
                                        if v > best.0 {
                                            best = (v, yy * w + xx);
                                        }
                                    }
                                }
                            }
                            pat.push(best.1);
                        }
                        xo += stride;
                    }
                    y += stride;
                }
            }
            _ => {}
        }
    }
    pat
}

/// Central-difference check of input and parameter gradients of a stack on
/// `probes` random coordinates per tensor.
fn check_stack(
    name: &str,
    layers: &[Layer<f64>],
    input: &Tensor<f64>,
    obj: &Objective<'_>,
    probes: usize,
    rng: &mut StreamRng,
    out: &mut Outcome,
) {
    let trace = forward_stack_traced(layers, input).unwrap();
    let g_out = obj.grad(&trace.output);
    let (g_in, grads) = backward_stack(layers, &trace, &g_out, true).unwrap();
    let g_in = g_in.expect("input gradient requested");
    let eval = |ls: &[Layer<f64>], x: &Tensor<f64>| obj.value(&forward_stack(ls, x).unwrap());
    let probe = |out: &mut Outcome, analytic: f64, plus: (Vec<Layer<f64>>, Tensor<f64>), minus: (Vec<Layer<f64>>, Tensor<f64>), label: String| {
        out.probes += 1;
        if kink_pattern(&plus.0, &plus.1) != kink_pattern(&minus.0, &minus.1) {
            out.excluded += 1;
            return;
        }
        let numeric = (eval(&plus.0, &plus.1) - eval(&minus.0, &minus.1)) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        out.record(rel, GRAD_TOL, || format!("{name}: {label} analytic {analytic:e} numeric {numeric:e}"));
    };
    for _ in 0..probes.min(input.len()) {
        let i = rng.random_range(0..input.len());
        let mut p = input.clone();
        p.data_mut()[i] += FD_STEP;
        let mut m = input.clone();
        m.data_mut()[i] -= FD_STEP;
        probe(out, g_in.data()[i], (layers.to_vec(), p), (layers.to_vec(), m), format!("input[{i}]"));
    }
    for (li, g) in grads.layers.iter().enumerate() {
        let Some((gw, gb)) = g else { continue };
        for (which, gt) in [(0, gw), (1, gb)] {
            for _ in 0..probes.min(gt.len()) {
                let i = rng.random_range(0..gt.len());
                let shifted = |delta: f64| {
                    let mut ls = layers.to_vec();
                    let (w, b) = ls[li].params_mut().unwrap();
                    let t = if which == 0 { w } else { b };
                    t.data_mut()[i] += delta;
                    (ls, input.clone())
                };
                let label = format!("layer{li}.{}[{i}]", if which == 0 { "weight" } else { "bias" });
                probe(out, gt.data()[i], shifted(FD_STEP), shifted(-FD_STEP), label);
            }
        }
    }
}

fn conv_layer(rng: &mut StreamRng, cout: usize, k: usize, cin: usize) -> Layer<f64> {
    Layer::Conv { kernels: uniform(rng, &[cout, k, k, cin], -0.5, 0.5), bias: uniform(rng, &[cout], -0.2, 0.2) }
}

fn dense_layer(rng: &mut StreamRng, out: usize, inp: usize) -> Layer<f64> {
    Layer::Dense { weights: uniform(rng, &[out, inp], -0.5, 0.5), bias: uniform(rng, &[out], -0.2, 0.2) }
}

/// Distinct values, shuffled, so that max-pool windows have unique winners.
fn separated(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).unwrap()
}

/// Input whose entries all have magnitude at least `KINK`.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(KINK..2.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Randomized finite-difference checks: `per_kind` instances of each layer
/// kind in isolation plus `stacks` instances of the full default network
/// under the landmark loss.
pub fn gradient_suite(per_kind: usize, stacks: usize, probes: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "gradient-suite");
    let mut out = Outcome::default();
    for _ in 0..per_kind {
        let (h, w) = (rng.random_range(4..9), rng.random_range(4..9));
        let (cin, cout, k) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let layers = vec![conv_layer(&mut rng, cout, k, cin)];
        let x = uniform(&mut rng, &[h, w, cin], -1.0, 1.0);
        let c = uniform(&mut rng, &[h - k + 1, w - k + 1, cout], -1.0, 1.0);
        check_stack("conv", &layers, &x, &Objective::Linear(&c), probes, &mut rng, &mut out);

        let (win, stride) = (rng.random_range(1..4), rng.random_range(1..4));
        let layers = vec![Layer::MaxPool { window: win, stride }];
        let x = separated(&mut rng, &[h, w, cin]);
        let y = forward_stack(&layers, &x).unwrap();
        let c = uniform(&mut rng, y.shape(), -1.0, 1.0);
        check_stack("maxpool", &layers, &x, &Objective::Linear(&c), probes, &mut rng, &mut out);

        let layers = vec![Layer::AbsTanh];
        let x = away_from_zero(&mut rng, &[h, w, cin]);
        let c = uniform(&mut rng, &[h, w, cin], -1.0, 1.0);
        check_stack("abstanh", &layers, &x, &Objective::Linear(&c), probes, &mut rng, &mut out);

        let (ni, no) = (rng.random_range(1..30), rng.random_range(1..12));
        let layers = vec![dense_layer(&mut rng, no, ni)];
        let x = uniform(&mut rng, &[ni], -1.0, 1.0);
        let c = uniform(&mut rng, &[no], -1.0, 1.0);
        check_stack("dense", &layers, &x, &Objective::Linear(&c), probes, &mut rng, &mut out);
        out.instances += 4;
    }
    let arch = Architecture::default_for(5);
    for _ in 0..stacks {
        let layers = init_layers::<f64, _>(&arch, &mut rng).unwrap();
        let x = uniform(&mut rng, &[40, 40, 3], -1.5, 1.5);
        let truth = LandmarkSet::new(vec![[0.3, 0.35], [0.7, 0.35], [0.5, 0.55], [0.35, 0.75], [0.65, 0.75]]);
        let truth = LandmarkSet::new(truth.points.iter().map(|p| [p[0] + rng.random_range(-0.05..0.05), p[1] + rng.random_range(-0.05..0.05)]).collect());
        check_stack("default stack", &layers, &x, &Objective::Landmarks(&truth), probes, &mut rng, &mut out);
        out.instances += 1;
    }
    out
}

// ----------------------------------------------------------------------- EM

pub const EM_MONOTONE_TOL: f64 = 1e-9;
pub const EM_CLOSED_FORM_TOL: f64 = 1e-9;
pub const EM_ORACLE_TOL: f64 = 1e-6;

fn mixture_data(rng: &mut StreamRng, n: usize, d: usize, k: usize) -> FeatureMatrix<f64> {
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..k)];
            c.iter().map(|&m| m + rng.sample::<f64, _>(rand_distr::StandardNormal) * rng.random_range(0.3..1.5)).collect()
        })
        .collect();
    FeatureMatrix::from_rows(rows.iter().map(|r| r.as_slice())).unwrap()
}

/// Log-likelihood traces of randomized fits never decrease by more than
/// `EM_MONOTONE_TOL` relative to their magnitude (segments split at re-seeds).
pub fn em_monotone(fits: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "em-monotone");
    let mut out = Outcome::default();
    for f in 0..fits {
        let (n, d, k) = (rng.random_range(20..200), rng.random_range(1..6), rng.random_range(1..5));
        let x = mixture_data(&mut rng, n, d, k);
        let fit = gmm::fit(&x, k, f as u64, &GmmConfig::default()).unwrap();
        let reseeded: Vec<usize> = fit.reseeds.iter().map(|r| r.iteration).collect();
        for (i, w) in fit.trace.windows(2).enumerate() {
            if reseeded.contains(&i) {
                out.excluded += 1;
                continue;
            }
            out.probes += 1;
            let drop = (w[0] - w[1]) / w[0].abs().max(1.0);
            out.record(drop.max(0.0), EM_MONOTONE_TOL, || format!("fit {f}: step {i} {} -> {}", w[0], w[1]));
        }
        out.instances += 1;
    }
    out
}

/// K = 1 equals the sample mean and floored population variance.
pub fn em_closed_form(fits: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "em-closed-form");
    let mut out = Outcome::default();
    for f in 0..fits {
        let (n, d) = (rng.random_range(2..100), rng.random_range(1..8));
        let x = mixture_data(&mut rng, n, d, 2);
        let fit = gmm::fit(&x, 1, f as u64, &GmmConfig::default()).unwrap();
        for j in 0..d {
            let mean = (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64;
            let var = ((0..n).map(|i| (x.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64).max(gmm::VARIANCE_FLOOR);
            let em = (fit.model.means.data()[j] - mean).abs() / mean.abs().max(1.0);
            let ev = (fit.model.variances.data()[j] - var).abs() / var.max(1.0);
            out.record(em.max(ev), EM_CLOSED_FORM_TOL, || format!("fit {f}: dim {j}"));
        }
        out.record((fit.model.weights[0] - 1.0).abs(), EM_CLOSED_FORM_TOL, || format!("fit {f}: weight"));
        out.instances += 1;
    }
    out
}

/// Textbook EM on scalars with explicit Gaussian densities, no log space.
fn oracle_em(x: &[f64], mut w: Vec<f64>, mut mu: Vec<f64>, mut var: Vec<f64>, m_steps: usize) -> Vec<Vec<f64>> {
    let k = w.len();
    let resp = |w: &[f64], mu: &[f64], var: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let dens: Vec<f64> =
                    (0..k).map(|c| w[c] * (-(xi - mu[c]).powi(2) / (2.0 * var[c])).exp() / (2.0 * PI * var[c]).sqrt()).collect();
                let s: f64 = dens.iter().sum();
                dens.iter().map(|d| d / s).collect()
            })
            .collect()
    };
    for _ in 0..m_steps {
        let r = resp(&w, &mu, &var);
        for c in 0..k {
            let nk: f64 = r.iter().map(|ri| ri[c]).sum();
            mu[c] = r.iter().zip(x).map(|(ri, xi)| ri[c] * xi).sum::<f64>() / nk;
            var[c] = (r.iter().zip(x).map(|(ri, xi)| ri[c] * (xi - mu[c]).powi(2)).sum::<f64>() / nk).max(gmm::VARIANCE_FLOOR);
            w[c] = nk / x.len() as f64;
        }
    }
    resp(&w, &mu, &var)
}

/// 1-D fits with n ≤ 30 and K ≤ 3 against [`oracle_em`] from the same
/// initialization; final responsibilities compared.
pub fn em_oracle(fits: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "em-oracle");
    let mut out = Outcome::default();
    for f in 0..fits {
        let k = rng.random_range(1..4);
        let n = rng.random_range(k.max(3)..31);
        let x = mixture_data(&mut rng, n, 1, k);
        let init = gmm::initialize(&x, k, gmm::VARIANCE_FLOOR, &mut rng);
        let iterations = rng.random_range(2..40);
        let cfg = GmmConfig { max_iterations: iterations, tolerance: 0.0, ..GmmConfig::default() };
        let fit = gmm::fit_from(&x, init.clone(), &cfg).unwrap();
        if !fit.reseeds.is_empty() {
            out.excluded += 1;
            continue;
        }
        let xs: Vec<f64> = (0..n).map(|i| x.row(i)[0]).collect();
        let oracle = oracle_em(&xs, init.weights.clone(), init.means.data().to_vec(), init.variances.data().to_vec(), iterations - 1);
        let (resp, _) = gmm::responsibilities(&fit.model, &x);
        for i in 0..n {
            for c in 0..k {
                out.probes += 1;
                out.record((resp[i * k + c] - oracle[i][c]).abs(), EM_ORACLE_TOL, || format!("fit {f}: sample {i} component {c}"));
            }
        }
        out.instances += 1;
    }
    out
}

/// Posterior sums to one, is invariant to a common log-density shift, and
/// component permutation permutes the argmax.
pub fn posterior_properties(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "posterior");
    let mut out = Outcome::default();
    for t in 0..instances {
        let (k, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let model = GmmModel {
            weights: w,
            means: uniform(&mut rng, &[k, d], -3.0, 3.0),
            variances: uniform(&mut rng, &[k, d], 0.2, 2.0),
            tap: "FC5".into(),
        };
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (post, _) = model.posterior(&x);
        out.record((post.iter().sum::<f64>() - 1.0).abs(), 1e-9, || format!("instance {t}: posterior sum"));
        let logp = model.component_log_densities(&x);
        let shift = rng.random_range(-500.0..500.0);
        let shifted: Vec<f64> = logp.iter().map(|l| l + shift).collect();
        let (post2, _) = gmm::posterior_from_log(&shifted);
        let dev = post.iter().zip(&post2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.record(dev, 1e-9, || format!("instance {t}: shift invariance"));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted = GmmModel {
            weights: perm.iter().map(|&p| model.weights[p]).collect(),
            means: Tensor::from_vec(&[k, d], perm.iter().flat_map(|&p| model.means.data()[p * d..(p + 1) * d].to_vec()).collect()).unwrap(),
            variances: Tensor::from_vec(&[k, d], perm.iter().flat_map(|&p| model.variances.data()[p * d..(p + 1) * d].to_vec()).collect()).unwrap(),
            tap: "FC5".into(),
        };
        let (a, _) = model.assign(&x).unwrap();
        let (b, _) = permuted.assign(&x).unwrap();
        out.record(if perm[b] == a { 0.0 } else { 1.0 }, 0.5, || format!("instance {t}: permuted argmax"));
        out.instances += 1;
    }
    out
}

// ----------------------------------------------------------------- geometry

pub const EXACT_RESIDUAL: f64 = 1e-15;

fn random_points(rng: &mut StreamRng, m: usize) -> Vec<[f64; 2]> {
    (0..m).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()
}

/// Exact recovery of constructed similarity pairs.
pub fn similarity_exact(pairs: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "similarity-exact");
    let mut out = Outcome::default();
    for t in 0..pairs {
        let m = rng.random_range(2..8);
        let src = random_points(&mut rng, m);
        let h = SimilarityTransform::from_parts(
            rng.random_range(0.3..3.0),
            rng.random_range(-PI..PI),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h.apply(p)).collect();
        let fit = match estimate_similarity(&src, &dst) {
            Ok(f) => f,
            Err(e) => {
                out.failures.push(format!("pair {t}: {e}"));
                continue;
            }
        };
        out.record(fit.residual, EXACT_RESIDUAL, || format!("pair {t}: residual"));
        let dev = [fit.transform.a - h.a, fit.transform.b - h.b, fit.transform.tx - h.tx, fit.transform.ty - h.ty]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        out.record(dev, 1e-9, || format!("pair {t}: parameters"));
        out.instances += 1;
    }
    out
}

/// Noisy pairs: the least-squares estimate against an exhaustive (a, b)
/// grid with the translation solved in closed form per grid point.
pub fn similarity_grid_oracle(pairs: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "similarity-grid");
    let mut out = Outcome::default();
    let step = 0.005;
    for t in 0..pairs {
        let src = random_points(&mut rng, 5);
        let h = SimilarityTransform::from_parts(
            rng.random_range(0.6..1.4),
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let dst: Vec<[f64; 2]> =
            src.iter().map(|&p| h.apply(p)).map(|p| [p[0] + rng.random_range(-0.03..0.03), p[1] + rng.random_range(-0.03..0.03)]).collect();
        let fit = estimate_similarity(&src, &dst).unwrap();
        let n = src.len() as f64;
        let cost = |a: f64, b: f64| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (s, d) in src.iter().zip(&dst) {
                sx += d[0] - (a * s[0] - b * s[1]);
                sy += d[1] - (b * s[0] + a * s[1]);
            }
            let (tx, ty) = (sx / n, sy / n);
            src.iter().zip(&dst).map(|(s, d)| (a * s[0] - b * s[1] + tx - d[0]).powi(2) + (b * s[0] + a * s[1] + ty - d[1]).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let mut a = 0.0;
        while a <= 1.6 {
            let mut b = -1.1;
            while b <= 1.1 {
                let c = cost(a, b);
                if c < best.0 {
                    best = (c, a, b);
                }
                b += step;
            }
            a += step;
        }
        let dev = (fit.transform.a - best.1).abs().max((fit.transform.b - best.2).abs());
        out.record(dev, step, || format!("pair {t}: grid optimum ({}, {}) vs estimate", best.1, best.2));
        out.record((fit.residual - best.0).max(0.0), 1e-12, || format!("pair {t}: residual above grid minimum"));
        out.instances += 1;
    }
    out
}

pub fn smooth_image(shape: &[usize], phase: f64) -> Tensor<f64> {
    let (w, c) = (shape[1], shape[2]);
    Tensor::from_fn(shape, |i| {
        let ch = i % c;
        let x = ((i / c) % w) as f64;
        let y = (i / (c * w)) as f64;
        (0.21 * x + 0.1 * ch as f64 + phase).sin() + (0.17 * y - phase).cos()
    })
}

pub const WARP_ROUNDTRIP_TOL: f64 = 0.05;

/// Identity warps are bit-exact, integer shifts move columns, and a warp
/// followed by its inverse reproduces interior pixels.
pub fn warp_properties(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "warp");
    let mut out = Outcome::default();
    for t in 0..instances {
        let img = smooth_image(&[40, 40, 3], rng.random_range(0.0..6.0));
        let id = warp_image(&img, &SimilarityTransform::identity(), 0.0).unwrap();
        out.record(if id == img { 0.0 } else { 1.0 }, 0.5, || format!("instance {t}: identity"));
        let shifted = warp_image(&img, &SimilarityTransform::translation(1.0, 0.0), -7.0).unwrap();
        let mut dev = 0.0f64;
        for r in 0..40 {
            for ch in 0..3 {
                dev = dev.max((shifted.at3(r, 0, ch) + 7.0).abs());
                for c in 1..40 {
                    dev = dev.max((shifted.at3(r, c, ch) - img.at3(r, c - 1, ch)).abs());
                }
            }
        }
        out.record(dev, 1e-12, || format!("instance {t}: unit translation"));
        let h = SimilarityTransform::about(
            [20.0, 20.0],
            rng.random_range(0.98..1.02),
            rng.random_range(-0.03..0.03),
            [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        );
        let back = warp_image(&warp_image(&img, &h, 0.0).unwrap(), &h.inverse().unwrap(), 0.0).unwrap();
        let mut dev = 0.0f64;
        for r in 2..38 {
            for c in 2..38 {
                for ch in 0..3 {
                    dev = dev.max((back.at3(r, c, ch) - img.at3(r, c, ch)).abs());
                }
            }
        }
        out.record(dev, WARP_ROUNDTRIP_TOL, || format!("instance {t}: roundtrip"));
        out.instances += 1;
    }
    out
}

/// Translating both point sets by one vector changes only the translation.
pub fn similarity_equivariance(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "similarity-equivariance");
    let mut out = Outcome::default();
    for t in 0..instances {
        let src = random_points(&mut rng, 5);
        let dst = random_points(&mut rng, 5);
        let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let a = estimate_similarity(&src, &dst).unwrap().transform;
        let moved = |p: &[[f64; 2]]| p.iter().map(|q| [q[0] + v[0], q[1] + v[1]]).collect::<Vec<_>>();
        let b = estimate_similarity(&moved(&src), &moved(&dst)).unwrap().transform;
        out.record((a.a - b.a).abs().max((a.b - b.b).abs()), 1e-9, || format!("instance {t}"));
        out.instances += 1;
    }
    out
}

// ------------------------------------------------------------------ metrics

pub const METRIC_TOL: f64 = 1e-12;

fn random_landmarks(rng: &mut StreamRng) -> LandmarkSet<f64> {
    loop {
        let l = LandmarkSet::new(random_points(rng, 5));
        if l.inter_ocular() > 0.05 {
            return l;
        }
    }
}

/// Loss and error rate against direct arithmetic on random pairs, plus the
/// exactly representable 0 % and 100 % cases.
pub fn metric_suite(pairs: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "metrics");
    let mut out = Outcome::default();
    for t in 0..pairs {
        let truth = random_landmarks(&mut rng);
        let pred = LandmarkSet::new(random_points(&mut rng, 5));
        let (l, r) = (truth.points[0], truth.points[1]);
        let iod2 = (l[0] - r[0]) * (l[0] - r[0]) + (l[1] - r[1]) * (l[1] - r[1]);
        let mut sq = 0.0;
        let mut dist = 0.0;
        for (p, q) in pred.points.iter().zip(&truth.points) {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            sq += dx * dx + dy * dy;
            dist += (dx * dx + dy * dy).sqrt();
        }
        let loss_oracle = sq / iod2;
        let err_oracle = 100.0 * (dist / 5.0) / iod2.sqrt();
        let lv = loss(&pred, &truth).unwrap();
        let ev = tcnn::analysis::error_rate(&pred, &truth).unwrap();
        out.record((lv - loss_oracle).abs() / loss_oracle.max(1.0), METRIC_TOL, || format!("pair {t}: loss"));
        out.record((ev - err_oracle).abs() / err_oracle.max(1.0), METRIC_TOL, || format!("pair {t}: error rate"));
        out.instances += 1;
    }
    let truth = LandmarkSet::new(vec![[0.25, 0.375], [0.75, 0.375], [0.5, 0.5625], [0.3125, 0.75], [0.6875, 0.75]]);
    let zero = tcnn::analysis::error_rate(&truth, &truth).unwrap();
    out.record(if zero == 0.0 && loss(&truth, &truth).unwrap() == 0.0 { 0.0 } else { 1.0 }, 0.5, || "0% case".into());
    let iod = truth.inter_ocular();
    for offset in [[iod, 0.0], [0.0, -iod], [-iod, 0.0]] {
        let pred = truth.map(|p| [p[0] + offset[0], p[1] + offset[1]]);
        let e = tcnn::analysis::error_rate(&pred, &truth).unwrap();
        out.record(if e == 100.0 { 0.0 } else { 1.0 }, 0.5, || format!("100% case off by {e}"));
    }
    out
}

pub fn combine(parts: Vec<Outcome>) -> Outcome {
    let mut all = Outcome::default();
    for p in parts {
        all.merge(p);
    }
    all
}

// ------------------------------------------------------------------ fixtures

/// In-memory synthetic dataset, split and normalized like a run directory's.
pub fn synthetic_dataset(count: usize, modes: usize, seed: u64) -> tcnn::dataio::Dataset<f64> {
    let synth = tcnn::synth::synth_generate(&tcnn::synth::SynthConfig::new(count, modes, seed)).unwrap();
    let crops: Vec<_> =
        synth.records.iter().zip(&synth.images).filter_map(|(r, img)| tcnn::dataio::crop_record(img, r)).collect();
    tcnn::dataio::Dataset::from_crops(&crops, 1.0 / 11.0, seed).unwrap()
}
