//! Pixel-level helpers shared by cropping, warping and report rendering.

use image::{Rgb, RgbImage};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear sample of channel `c` of an `[H, W, C]` map at index coordinates
/// `(x, y)` (pixel centers sit on integers). Neighbours outside the map take
/// `fill`; a sample exactly on a pixel center returns that pixel unchanged.
#[inline]
pub fn bilinear_fill<T: Scalar>(t: &Tensor<T>, x: T, y: T, c: usize, fill: T) -> T {
    let (h, w, ch) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let (Some(x0), Some(y0)) = (x0f.to_i64(), y0f.to_i64()) else {
        return fill;
    };
    let d = t.data();
    let px = |xi: i64, yi: i64| -> T {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            fill
        } else {
            d[(yi as usize * w + xi as usize) * ch + c]
        }
    };
    if fx == T::zero() && fy == T::zero() {
        return px(x0, y0);
    }
    let top = px(x0, y0) * (T::one() - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (T::one() - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (T::one() - fy) + bottom * fy
}

/// Bilinear sample with edge clamping.
pub fn bilinear_clamped(img: &RgbImage, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xi: i64, yi: i64| f64::from(img.get_pixel(xi as u32, yi as u32)[c]);
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the box `(x, y, w, h)` of an image to a `size × size × 3` map of
/// raw 0–255 intensities.
pub fn crop_resize(img: &RgbImage, bbox: [f64; 4], size: usize) -> Tensor<f64> {
    let [bx, by, bw, bh] = bbox;
    let mut out = Tensor::zeros(&[size, size, 3]);
    let d = out.data_mut();
    for r in 0..size {
        let sy = by + (r as f64 + 0.5) * bh / size as f64 - 0.5;
        for col in 0..size {
            let sx = bx + (col as f64 + 0.5) * bw / size as f64 - 0.5;
            for c in 0..3 {
                d[(r * size + col) * 3 + c] = bilinear_clamped(img, sx, sy, c);
            }
        }
    }
    out
}

/// Converts a `[H, W, 3]` map of 0–255 intensities to an image, clamping.
pub fn to_image<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    RgbImage::from_fn(w, h, |x, y| {
        let px = |c| {
            let v = t.at3(y as usize, x as usize, c).as_f64();
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Tiles equally sized images into a grid with `cols` columns and a 1-pixel gutter.
pub fn tile(images: &[RgbImage], cols: usize) -> RgbImage {
    let cols = cols.max(1);
    let (w, h) = images.first().map(|i| (i.width(), i.height())).unwrap_or((1, 1));
    let rows = images.len().div_ceil(cols).max(1);
    let mut out = RgbImage::from_pixel(
        cols as u32 * (w + 1) + 1,
        rows as u32 * (h + 1) + 1,
        Rgb([255, 255, 255]),
    );
    for (i, img) in images.iter().enumerate() {
        let ox = (i % cols) as u32 * (w + 1) + 1;
        let oy = (i / cols) as u32 * (h + 1) + 1;
        for (x, y, p) in img.enumerate_pixels() {
            out.put_pixel(ox + x, oy + y, *p);
        }
    }
    out
}
