//! Synthetic multi-pose face generator standing in for licensed benchmarks.
//!
//! Each image is a 64×64 canvas with a 48×48 face box. A face is a canonical
//! five-point template, bent by a per-mode yaw, then moved by a similarity
//! (mode-specific mean roll plus random roll, scale and shift) about the box
//! center. Dark eye blobs, a nose blob, red mouth corners joined by a lip line,
//! optional glasses rings and a skin ellipse are painted over a random
//! textured background.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::SimilarityTransform;
use crate::dataio::{format_annotations, AnnotationRecord};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::rng;

pub const CANVAS: u32 = 64;
pub const FACE_BOX: [f64; 4] = [8.0, 8.0, 48.0, 48.0];

/// Per-mode mean roll spread, radians between the extreme modes' center and 0.
const ROLL_SPREAD: f64 = 0.3;
const ROLL_SD: f64 = 0.04;
const SCALE_SD: f64 = 0.03;
const SHIFT_SD: f64 = 0.02;
const EYEGLASS_RATE: f64 = 0.153;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub modes: usize,
    pub seed: u64,
    /// Multiplier on all per-image pose noise; 0 renders every face of a mode
    /// with the mode's exact mean geometry.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn new(count: usize, modes: usize, seed: u64) -> Self {
        Self { count, modes, seed, jitter: 1.0 }
    }
}

/// Position of mode `p` of `modes` on `[-1, 1]`.
fn mode_position(p: usize, modes: usize) -> f64 {
    if modes <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * p as f64 / (modes - 1) as f64
    }
}

/// Mouth-corner displacement of a smiling face at unit jitter.
pub const SMILE: f64 = 0.025;

/// Pre-transform landmark template of a mode, in box-normalized coordinates.
/// `smile` widens and raises the mouth corners.
pub fn template(mode: usize, modes: usize, smile: f64) -> LandmarkSet<f64> {
    let yaw = mode_position(mode, modes);
    let squash = |x: f64| 0.5 + (x - 0.5) * (1.0 - 0.2 * yaw.abs()) + 0.08 * yaw;
    LandmarkSet::new(vec![
        [squash(0.32), 0.38],
        [squash(0.68), 0.38],
        [0.5 + 0.15 * yaw, 0.58],
        [squash(0.36) - smile, 0.76 - 0.8 * smile],
        [squash(0.64) + smile, 0.76 - 0.8 * smile],
    ])
}

/// Mean roll of a mode in radians.
pub fn mode_roll(mode: usize, modes: usize) -> f64 {
    ROLL_SPREAD * mode_position(mode, modes)
}

/// Ground truth of one generated face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFace {
    pub mode: usize,
    pub smiling: bool,
    /// Mouth-corner displacement applied to the template.
    pub smile: f64,
    /// Maps template coordinates to box-normalized coordinates.
    pub transform: SimilarityTransform<f64>,
    pub landmarks: LandmarkSet<f64>,
    pub attributes: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub faces: Vec<SynthFace>,
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub modes: usize,
    pub seed: u64,
    pub jitter: f64,
    pub annotation_file: String,
    /// SHA-256 over the annotation file followed by every image file in order.
    pub checksum: String,
}

struct Paint {
    background: [f64; 3],
    gradient: [[f64; 2]; 3],
    stripe: (f64, f64, f64, f64),
    skin: [f64; 3],
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    if config.count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    if config.modes == 0 {
        return Err(Error::Config("synthetic dataset needs at least one pose mode".into()));
    }
    let mut rng = rng::stream(config.seed, "synth");
    let mut faces = Vec::with_capacity(config.count);
    let mut records = Vec::with_capacity(config.count);
    let mut images = Vec::with_capacity(config.count);
    let j = config.jitter;
    for i in 0..config.count {
        let mode = rng.random_range(0..config.modes);
        let male = rng.random_bool(0.5);
        let smiling = rng.random_bool(0.5);
        let glasses = rng.random_bool(EYEGLASS_RATE);
        let roll = mode_roll(mode, config.modes) + ROLL_SD * j * normal(&mut rng);
        let scale = 1.0 + SCALE_SD * j * normal(&mut rng);
        let shift = [SHIFT_SD * j * normal(&mut rng), SHIFT_SD * j * normal(&mut rng)];
        let transform = SimilarityTransform::about([0.5, 0.5], scale, roll, shift);
        let smile = if smiling { SMILE * j } else { 0.0 };
        let landmarks = template(mode, config.modes, smile).map(|p| transform.apply(p));

        let tone = rng.random_range(0.45..0.85) * if male { 0.9 } else { 1.0 };
        let paint = Paint {
            background: [rng.random(), rng.random(), rng.random()],
            gradient: std::array::from_fn(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]),
            stripe: (
                rng.random_range(6.0..14.0),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..0.12),
            ),
            skin: [tone, 0.8 * tone, 0.65 * tone],
        };
        let noise: Vec<f64> = (0..(CANVAS * CANVAS * 3) as usize).map(|_| 0.03 * normal(&mut rng)).collect();
        let yaw = mode_position(mode, config.modes);
        let image = render(&transform, &landmarks, glasses, yaw, &paint, &noise);

        let bbox = FACE_BOX;
        let attributes = [male as u8, smiling as u8, glasses as u8];
        records.push(AnnotationRecord {
            path: format!("images/{i:06}.png"),
            bbox: Some(bbox),
            landmarks: landmarks
                .points
                .iter()
                .map(|p| [bbox[0] + p[0] * bbox[2], bbox[1] + p[1] * bbox[3]])
                .collect(),
            attributes: Some(attributes),
        });
        faces.push(SynthFace { mode, smiling, smile, transform, landmarks, attributes });
        images.push(image);
    }
    Ok(SynthDataset { config: *config, faces, records, images })
}

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p[0] - a[0] - t * vx, p[1] - a[1] - t * vy);
    dx * dx + dy * dy
}

fn render(
    h: &SimilarityTransform<f64>,
    lm: &LandmarkSet<f64>,
    glasses: bool,
    yaw: f64,
    paint: &Paint,
    noise: &[f64],
) -> RgbImage {
    let inv = h.inverse().expect("generator scales are positive");
    let s = h.scale();
    let [bx, by, bw, bh] = FACE_BOX;
    let pts = &lm.points;
    let (freq, angle, phase, amp) = paint.stripe;
    RgbImage::from_fn(CANVAS, CANVAS, |x, y| {
        let u = (x as f64 + 0.5 - bx) / bw;
        let v = (y as f64 + 0.5 - by) / bh;
        let mut px = [0.0; 3];
        let stripe = amp * (freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
        for c in 0..3 {
            let g = paint.gradient[c];
            px[c] = paint.background[c] + g[0] * (u - 0.5) + g[1] * (v - 0.5) + stripe;
        }
        let q = inv.apply([u, v]);
        let e = ((q[0] - 0.5 - 0.05 * yaw) / 0.36).powi(2) + ((q[1] - 0.56) / 0.46).powi(2);
        let face_alpha = ((1.0 - e) / 0.15).clamp(0.0, 1.0);
        blend(&mut px, paint.skin, face_alpha);
        let d2 = |p: [f64; 2]| (u - p[0]).powi(2) + (v - p[1]).powi(2);
        for eye in &pts[..2] {
            blend(&mut px, [0.08, 0.06, 0.06], 0.95 * gauss(d2(*eye), 0.04 * s));
            if glasses {
                let r = d2(*eye).sqrt() - 0.075 * s;
                blend(&mut px, [0.03, 0.03, 0.05], 0.9 * gauss(r * r, 0.012 * s));
            }
        }
        blend(&mut px, [0.5, 0.28, 0.22], 0.85 * gauss(d2(pts[2]), 0.035 * s));
        let lip = segment_dist2([u, v], pts[3], pts[4]);
        blend(&mut px, [0.72, 0.12, 0.16], 0.7 * gauss(lip, 0.015 * s));
        for corner in &pts[3..5] {
            blend(&mut px, [0.8, 0.1, 0.15], 0.9 * gauss(d2(*corner), 0.03 * s));
        }
        let base = ((y * CANVAS + x) * 3) as usize;
        Rgb(std::array::from_fn(|c| {
            ((px[c] + noise[base + c]) * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

impl SynthDataset {
    /// Writes `images/`, `annotations.txt` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir.join("images"))?;
        let annotations = format_annotations(&self.records);
        fs::write(dir.join("annotations.txt"), &annotations)?;
        let mut hasher = Sha256::new();
        hasher.update(annotations.as_bytes());
        for (rec, img) in self.records.iter().zip(&self.images) {
            let bytes = encode_png(img)?;
            hasher.update(&bytes);
            fs::write(dir.join(&rec.path), bytes)?;
        }
        let manifest = DatasetManifest {
            count: self.records.len(),
            modes: self.config.modes,
            seed: self.config.seed,
            jitter: self.config.jitter,
            annotation_file: "annotations.txt".into(),
            checksum: hex::encode(hasher.finalize()),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn modes(&self) -> Vec<usize> {
        self.faces.iter().map(|f| f.mode).collect()
    }
}
