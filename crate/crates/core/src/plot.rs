//! Minimal raster charts for reports. No text: axes and series only, the
//! numbers live in the accompanying tables.

use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [127, 127, 127]];

const MARGIN: u32 = 24;

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        put(img, x, y, c);
        put(img, x + 1, y, c);
    }
}

fn frame(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (l, b) = (MARGIN as f64, (height - MARGIN) as f64);
    line(&mut img, (l, MARGIN as f64), (l, b), [0, 0, 0]);
    line(&mut img, (l, b), ((width - MARGIN) as f64, b), [0, 0, 0]);
    img
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Polyline chart of `(x, y)` series; axes span the data range.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> RgbImage {
    let mut img = frame(width, height);
    let (x0, x1) = bounds(series.iter().flatten().map(|p| p.0));
    let (y0, y1) = bounds(series.iter().flatten().map(|p| p.1).chain([0.0]));
    let (w, h) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let map = |p: (f64, f64)| (MARGIN as f64 + (p.0 - x0) / (x1 - x0) * w, (height - MARGIN) as f64 - (p.1 - y0) / (y1 - y0) * h);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<_> = s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&p| map(p)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
    }
    img
}

/// Grouped bar chart: `groups[g][s]` is the bar of series `s` in group `g`.
pub fn bar_chart(groups: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = frame(width, height);
    let (_, top) = bounds(groups.iter().flatten().copied().chain([0.0]));
    let per = groups.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let slot = (width - 2 * MARGIN) as f64 / groups.len().max(1) as f64;
    let bar = slot / (per as f64 + 1.0);
    let h = (height - 2 * MARGIN) as f64;
    for (g, vals) in groups.iter().enumerate() {
        for (s, &v) in vals.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 {
                continue;
            }
            let x = MARGIN as f64 + g as f64 * slot + (s as f64 + 0.5) * bar;
            let y = (height - MARGIN) as f64 - v / top * h;
            let c = PALETTE[s % PALETTE.len()];
            for px in x.round() as i64..(x + bar).round() as i64 {
                for py in y.round() as i64..(height - MARGIN) as i64 {
                    put(&mut img, px, py, c);
                }
            }
        }
    }
    img
}
