use crate::error::{Error, Result};
use crate::raster::bilinear_fill;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::similarity::SimilarityTransform;

/// Backward warp `out(x) = img(H⁻¹(x))` with bilinear interpolation.
///
/// Coordinates are continuous pixel units: pixel `(c, r)` spans
/// `[c, c+1) × [r, r+1)`, so box-normalized `u` maps to `40·u` on a 40×40
/// crop. Samples outside the image take `fill`.
pub fn warp_image<T: Scalar>(img: &Tensor<T>, h: &SimilarityTransform<T>, fill: T) -> Result<Tensor<T>> {
    let (height, width, ch) = match *img.shape() {
        [a, b, c] => (a, b, c),
        ref s => return Err(Error::Shape(format!("warp expects [H, W, C], found {s:?}"))),
    };
    let inv = h.inverse()?;
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); img.len()];
    for r in 0..height {
        for c in 0..width {
            let src = inv.apply([T::from_usize_lossy(c) + half, T::from_usize_lossy(r) + half]);
            let (sx, sy) = (src[0] - half, src[1] - half);
            for k in 0..ch {
                out[(r * width + c) * ch + k] = bilinear_fill(img, sx, sy, k, fill);
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}
