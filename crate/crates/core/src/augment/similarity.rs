use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Non-reflective similarity `x' = a·x − b·y + tx`, `y' = b·x + a·y + ty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform<T> {
    pub a: T,
    pub b: T,
    pub tx: T,
    pub ty: T,
}

impl<T: Scalar> SimilarityTransform<T> {
    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero(), tx: T::zero(), ty: T::zero() }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        Self { a: T::one(), b: T::zero(), tx, ty }
    }

    pub fn from_parts(scale: T, angle: T, tx: T, ty: T) -> Self {
        Self { a: scale * angle.cos(), b: scale * angle.sin(), tx, ty }
    }

    /// Scale `s` and rotation `θ` about `center`, followed by a shift.
    pub fn about(center: [T; 2], scale: T, angle: T, shift: [T; 2]) -> Self {
        let r = Self::from_parts(scale, angle, T::zero(), T::zero());
        let c = r.apply(center);
        Self { tx: center[0] - c[0] + shift[0], ty: center[1] - c[1] + shift[1], ..r }
    }

    pub fn scale(&self) -> T {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    pub fn rotation(&self) -> T {
        self.b.atan2(self.a)
    }

    #[inline]
    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        [self.a * p[0] - self.b * p[1] + self.tx, self.b * p[0] + self.a * p[1] + self.ty]
    }

    pub fn inverse(&self) -> Result<Self> {
        let s2 = self.a * self.a + self.b * self.b;
        if s2.sqrt() <= T::lit(1e-9) {
            return Err(Error::Degenerate(format!(
                "similarity with scale {} is not invertible",
                s2.sqrt()
            )));
        }
        let (a, b) = (self.a / s2, -self.b / s2);
        Ok(Self { a, b, tx: -(a * self.tx - b * self.ty), ty: -(b * self.tx + a * self.ty) })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let t = self.apply([other.tx, other.ty]);
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.a * other.b + self.b * other.a,
            tx: t[0],
            ty: t[1],
        }
    }
}

/// Least-squares similarity fit and its residual sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityFit<T> {
    pub transform: SimilarityTransform<T>,
    pub residual: T,
}

/// Minimizes `Σ ||H(src_j) − dst_j||²` over non-reflective similarities.
pub fn estimate_similarity<T: Scalar>(src: &[[T; 2]], dst: &[[T; 2]]) -> Result<SimilarityFit<T>> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: src.len() });
    }
    let n = T::from_usize_lossy(src.len());
    let centroid = |pts: &[[T; 2]]| {
        let (sx, sy) = pts.iter().fold((T::zero(), T::zero()), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    };
    let (ms, md) = (centroid(src), centroid(dst));
    let (mut norm, mut dot, mut cross) = (T::zero(), T::zero(), T::zero());
    for (s, d) in src.iter().zip(dst) {
        let (sx, sy) = (s[0] - ms[0], s[1] - ms[1]);
        let (dx, dy) = (d[0] - md[0], d[1] - md[1]);
        norm += sx * sx + sy * sy;
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
    }
    let spread = ms[0].abs().max(ms[1].abs()).max(T::one());
    if norm <= T::lit(1e-24) * spread * spread {
        return Err(Error::Degenerate("all source points coincide".into()));
    }
    let (a, b) = (dot / norm, cross / norm);
    let transform = SimilarityTransform {
        a,
        b,
        tx: md[0] - (a * ms[0] - b * ms[1]),
        ty: md[1] - (b * ms[0] + a * ms[1]),
    };
    let residual = src
        .iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = transform.apply(*s);
            (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
        })
        .sum();
    Ok(SimilarityFit { transform, residual })
}
