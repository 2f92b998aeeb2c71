//! Annotation files, face-crop preprocessing, normalization and mirroring.
//!
//! # Annotation format
//!
//! One record per line, fields separated by a single TAB:
//!
//! ```text
//! path  x  y  w  h  x1  y1 ... xm  ym  [gender  smiling  eyeglasses]
//! ```
//!
//! `path` is relative to the image root; the box and landmarks are in pixels;
//! the optional attributes are `0`/`1`. A record without a detected face
//! writes `-` for all four box fields; such records are dropped for training
//! and counted as failures in evaluation. Blank lines and lines starting with
//! `#` are ignored. The landmark count `m` is inferred from the field count
//! and must agree across the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::network::{CHANNELS, CROP};
use crate::raster::crop_resize;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard-deviation floor applied to every pixel of the normalization image.
pub const STD_FLOOR: f64 = 1e-6;

/// Landmarks may fall this far outside the box (as a fraction of its size,
/// per side) before a record is skipped: a 1.5× enlarged box.
pub const BOX_SLACK: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub path: String,
    /// `(x, y, w, h)` in pixels; `None` when no face was detected.
    pub bbox: Option<[f64; 4]>,
    pub landmarks: Vec<[f64; 2]>,
    pub attributes: Option<[u8; 3]>,
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut m_seen: Option<usize> = None;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Annotation { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        let n = fields.len();
        if n < 9 {
            return Err(err(format!("{n} fields, need at least 9")));
        }
        // 1 path + 4 box + 2m landmarks is odd; attributes add 3 more.
        let (m, has_attr) = if n % 2 == 1 { ((n - 5) / 2, false) } else { ((n - 8) / 2, true) };
        if m < 2 {
            return Err(err(format!("{n} fields leave {m} landmarks")));
        }
        if let Some(prev) = m_seen {
            if prev != m {
                return Err(err(format!("{m} landmarks, earlier records have {prev}")));
            }
        }
        m_seen = Some(m);
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| err(format!("not a number: `{s}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{s}`")));
            }
            Ok(v)
        };
        let bbox = if fields[1..5].iter().all(|f| f.trim() == "-") {
            None
        } else {
            let b = [num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?];
            if b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(err("box width and height must be positive".into()));
            }
            Some(b)
        };
        let landmarks = (0..m)
            .map(|j| Ok([num(fields[5 + 2 * j])?, num(fields[6 + 2 * j])?]))
            .collect::<Result<Vec<_>>>()?;
        let attributes = if has_attr {
            let mut a = [0u8; 3];
            for (k, f) in fields[5 + 2 * m..].iter().enumerate() {
                a[k] = match f.trim() {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(err(format!("attribute must be 0 or 1, found `{other}`"))),
                };
            }
            Some(a)
        } else {
            None
        };
        out.push(AnnotationRecord { path: fields[0].to_string(), bbox, landmarks, attributes });
    }
    Ok(out)
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.path);
        match r.bbox {
            Some(b) => b.iter().for_each(|v| write!(s, "\t{v}").expect("string write")),
            None => s.push_str("\t-\t-\t-\t-"),
        }
        for p in &r.landmarks {
            write!(s, "\t{}\t{}", p[0], p[1]).expect("string write");
        }
        if let Some(a) = r.attributes {
            write!(s, "\t{}\t{}\t{}", a[0], a[1], a[2]).expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Pixel coordinates to box-normalized `[0, 1]` coordinates.
pub fn normalize_point(p: [f64; 2], bbox: [f64; 4]) -> [f64; 2] {
    [(p[0] - bbox[0]) / bbox[2], (p[1] - bbox[1]) / bbox[3]]
}

pub fn denormalize_point(p: [f64; 2], bbox: [f64; 4]) -> [f64; 2] {
    [bbox[0] + p[0] * bbox[2], bbox[1] + p[1] * bbox[3]]
}

/// A resized face crop before intensity normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCrop {
    pub id: String,
    /// `[40, 40, 3]`, raw 0–255 intensities.
    pub pixels: Tensor<f64>,
    pub landmarks: LandmarkSet<f64>,
    pub attributes: Option<[u8; 3]>,
}

/// Crops and resizes one record. Returns `None` (with a warning) when a
/// landmark lies outside the enlarged box or no face box is present.
pub fn crop_record(img: &image::RgbImage, rec: &AnnotationRecord) -> Option<RawCrop> {
    let bbox = rec.bbox?;
    let pts: Vec<[f64; 2]> = rec.landmarks.iter().map(|&p| normalize_point(p, bbox)).collect();
    let (lo, hi) = (-BOX_SLACK, 1.0 + BOX_SLACK);
    if pts.iter().any(|p| p[0] < lo || p[0] > hi || p[1] < lo || p[1] > hi) {
        warn!("{}: landmark outside the 1.5x face box, record skipped", rec.path);
        return None;
    }
    Some(RawCrop {
        id: rec.path.clone(),
        pixels: crop_resize(img, bbox, CROP),
        landmarks: LandmarkSet::new(pts),
        attributes: rec.attributes,
    })
}

/// Crops loaded from an annotation file.
#[derive(Debug, Clone)]
pub struct LoadedRecords {
    pub crops: Vec<RawCrop>,
    /// Paths of records without a detected face.
    pub failures: Vec<String>,
    pub skipped: usize,
}

pub fn load_records(annotation_file: &Path, image_root: &Path) -> Result<LoadedRecords> {
    let text = fs::read_to_string(annotation_file)?;
    let records = parse_annotations(&text)?;
    let results: Vec<(Option<RawCrop>, bool)> = records
        .par_iter()
        .map(|rec| {
            if rec.bbox.is_none() {
                return (None, true);
            }
            match image::open(image_root.join(&rec.path)) {
                Ok(img) => (crop_record(&img.to_rgb8(), rec), false),
                Err(e) => {
                    warn!("{}: unreadable image ({e}), record skipped", rec.path);
                    (None, false)
                }
            }
        })
        .collect();
    let mut crops = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0;
    for (rec, (crop, failed)) in records.iter().zip(results) {
        match (crop, failed) {
            (Some(c), _) => crops.push(c),
            (None, true) => failures.push(rec.path.clone()),
            (None, false) => skipped += 1,
        }
    }
    Ok(LoadedRecords { crops, failures, skipped })
}

/// Per-pixel mean and standard deviation of the training crops.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats<T> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

impl<T: Scalar> NormalizationStats<T> {
    pub fn from_crops<'a>(crops: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<Self> {
        let crops: Vec<&Tensor<f64>> = crops.into_iter().collect();
        if crops.is_empty() {
            return Err(Error::EmptyDataset("no crops for normalization statistics".into()));
        }
        let shape = [CROP, CROP, CHANNELS];
        let n = crops.len() as f64;
        let mut mean = vec![0.0f64; shape.iter().product()];
        for c in &crops {
            c.expect_shape(&shape)?;
            for (m, &v) in mean.iter_mut().zip(c.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; mean.len()];
        for c in &crops {
            for ((s, &v), &m) in var.iter_mut().zip(c.data()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<T> = var.iter().map(|s| T::lit((s / n).sqrt().max(STD_FLOOR))).collect();
        let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
        Ok(Self { mean: Tensor::from_vec(&shape, mean)?, std: Tensor::from_vec(&shape, std)? })
    }

    pub fn normalize(&self, raw: &Tensor<f64>) -> Result<Tensor<T>> {
        raw.expect_shape(self.mean.shape())?;
        let data = raw
            .data()
            .iter()
            .zip(self.mean.data().iter().zip(self.std.data()))
            .map(|(&v, (&m, &s))| (T::lit(v) - m) / s)
            .collect();
        Tensor::from_vec(raw.shape(), data)
    }

    pub fn denormalize(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        t.expect_shape(self.mean.shape())?;
        let data = t
            .data()
            .iter()
            .zip(self.mean.data().iter().zip(self.std.data()))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect();
        Tensor::from_vec(t.shape(), data)
    }

    pub fn cast<U: Scalar>(&self) -> NormalizationStats<U> {
        NormalizationStats { mean: self.mean.cast(), std: self.std.cast() }
    }
}

/// One normalized network input with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// `[40, 40, 3]`, normalized.
    pub image: Tensor<T>,
    pub landmarks: LandmarkSet<T>,
    pub attributes: Option<[u8; 3]>,
}

impl<T: Scalar> Sample<T> {
    pub fn from_crop(crop: &RawCrop, stats: &NormalizationStats<T>) -> Result<Self> {
        Ok(Self {
            id: crop.id.clone(),
            image: stats.normalize(&crop.pixels)?,
            landmarks: crop.landmarks.cast(),
            attributes: crop.attributes,
        })
    }
}

/// Horizontal flip: columns reversed, `x -> 1 - x`, left/right roles swapped.
pub fn mirror_sample<T: Scalar>(s: &Sample<T>) -> Result<Sample<T>> {
    let landmarks = s.landmarks.mirrored()?;
    let (h, w, c) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
    let src = s.image.data();
    let image = Tensor::from_fn(s.image.shape(), |i| {
        let ch = i % c;
        let x = (i / c) % w;
        let y = i / (c * w);
        src[(y * w + (w - 1 - x)) * c + ch]
    });
    debug_assert_eq!(image.len(), h * w * c);
    Ok(Sample { id: s.id.clone(), image, landmarks, attributes: s.attributes })
}

/// Random train/validation partition of `0..n`. The validation part holds
/// `round(n · fraction)` indices, clamped to `[1, n − 1]`.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Normalized train and validation samples sharing training-split statistics.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub validation: Vec<Sample<T>>,
    pub stats: NormalizationStats<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_crops(crops: &[RawCrop], validation_fraction: f64, seed: u64) -> Result<Self> {
        if crops.is_empty() {
            return Err(Error::EmptyDataset("no usable records".into()));
        }
        let (tr, va) = split_indices(crops.len(), validation_fraction, seed)?;
        let stats = NormalizationStats::from_crops(tr.iter().map(|&i| &crops[i].pixels))?;
        let build = |ids: &[usize]| -> Result<Vec<Sample<T>>> {
            ids.iter().map(|&i| Sample::from_crop(&crops[i], &stats)).collect()
        };
        Ok(Self { train: build(&tr)?, validation: build(&va)?, stats })
    }
}

/// Reads an annotation file, crops every face and normalizes with statistics
/// of the training split.
pub fn load_dataset<T: Scalar>(
    annotation_file: &Path,
    image_root: &Path,
    validation_fraction: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let loaded = load_records(annotation_file, image_root)?;
    if loaded.crops.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} yielded no usable records",
            annotation_file.display()
        )));
    }
    Dataset::from_crops(&loaded.crops, validation_fraction, seed)
}
