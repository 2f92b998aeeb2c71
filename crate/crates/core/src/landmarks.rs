use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of landmarks in the standard layout.
pub const STANDARD_COUNT: usize = 5;

/// Role order of the standard layout.
pub const ROLES: [&str; STANDARD_COUNT] =
    ["left_eye", "right_eye", "nose", "left_mouth", "right_mouth"];

/// Index permutation applied by a horizontal flip of the standard layout.
pub const MIRROR_PERMUTATION: [usize; STANDARD_COUNT] = [1, 0, 2, 4, 3];

/// `m` landmark points in box-normalized coordinates. Points 0 and 1 are the eyes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet<T> {
    pub points: Vec<[T; 2]>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<[T; 2]>) -> Self {
        Self { points }
    }

    /// From `(x1, y1, ..., xm, ym)`.
    pub fn from_flat(v: &[T]) -> Result<Self> {
        if v.len() % 2 != 0 || v.is_empty() {
            return Err(Error::Shape(format!("{} coordinates do not form points", v.len())));
        }
        Ok(Self { points: v.chunks_exact(2).map(|c| [c[0], c[1]]).collect() })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        Self::from_flat(t.data())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    pub fn inter_ocular(&self) -> T {
        let (a, b) = (self.points[0], self.points[1]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// Horizontal flip in box-normalized coordinates: `x -> 1 - x` with the
    /// left/right roles swapped.
    pub fn mirrored(&self) -> Result<Self> {
        if self.points.len() != STANDARD_COUNT {
            return Err(Error::UnsupportedLayout(format!(
                "mirroring needs the {STANDARD_COUNT}-point layout, found {} points",
                self.points.len()
            )));
        }
        Ok(Self {
            points: MIRROR_PERMUTATION
                .iter()
                .map(|&src| {
                    let p = self.points[src];
                    [T::one() - p[0], p[1]]
                })
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn([T; 2]) -> [T; 2]) -> Self {
        Self { points: self.points.iter().map(|&p| f(p)).collect() }
    }

    pub fn mean_with(&self, other: &Self) -> Self {
        let half = T::lit(0.5);
        Self {
            points: self
                .points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| [(a[0] + b[0]) * half, (a[1] + b[1]) * half])
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LandmarkSet<U> {
        LandmarkSet { points: self.points.iter().map(|p| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64())]).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LandmarkSet<f64> {
        LandmarkSet::new(vec![[0.3, 0.3], [0.7, 0.3], [0.5, 0.55], [0.35, 0.75], [0.62, 0.8]])
    }

    #[test]
    fn mirror_is_involution_and_swaps_roles() {
        let s = sample();
        let m = s.mirrored().unwrap();
        let back = m.mirrored().unwrap();
        for (p, q) in back.points.iter().zip(&s.points) {
            assert!((p[0] - q[0]).abs() < 1e-15 && p[1] == q[1]);
        }
        assert_eq!(m.points[2], [0.5, 0.55]);
        assert!((m.points[0][0] - 0.3).abs() < 1e-15 && m.points[0][1] == 0.3);
        assert!((m.points[1][0] - 0.7).abs() < 1e-15);
        assert!((m.points[3][0] - 0.38).abs() < 1e-12 && m.points[3][1] == 0.8);
    }

    #[test]
    fn mirror_rejects_other_layouts() {
        let s = LandmarkSet::new(vec![[0.1f64, 0.2], [0.3, 0.4]]);
        assert!(matches!(s.mirrored(), Err(Error::UnsupportedLayout(_))));
    }

    #[test]
    fn flat_roundtrip() {
        let s = sample();
        assert_eq!(LandmarkSet::from_flat(&s.to_flat()).unwrap(), s);
        assert!(LandmarkSet::<f64>::from_flat(&[1.0, 2.0, 3.0]).is_err());
        assert!((s.inter_ocular() - 0.4).abs() < 1e-15);
    }
}
