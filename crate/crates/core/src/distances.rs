//! Latent-space distances: the diffuse distance `d_hat`, the MICo angular
//! distance, cosine and L1 baselines, and the interval quasimetric (IQE).

use std::ops::Deref;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistanceError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cosine distance undefined for a zero vector")]
    ZeroVector,
    #[error("iqe shape {k}x{l} does not match dimension {dim}")]
    Shape { k: usize, l: usize, dim: usize },
    #[error("iqe alpha must lie in [0,1], got {0}")]
    Alpha(f64),
    #[error("latent vector must be non-empty with finite entries")]
    Latent,
}

/// A point in the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T>(Vec<T>);

impl<T: Scalar> LatentVector<T> {
    pub fn new(entries: Vec<T>) -> Result<Self, DistanceError> {
        if entries.is_empty() || entries.iter().any(|x| !x.is_finite()) {
            return Err(DistanceError::Latent);
        }
        Ok(LatentVector(entries))
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for LatentVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Shape of an interval quasimetric embedding: `k` components of `l`
/// intervals each, mixed by `alpha` between max and mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqeShape<T> {
    pub k: usize,
    pub l: usize,
    pub alpha: T,
}

impl<T: Scalar> IqeShape<T> {
    pub fn new(k: usize, l: usize, alpha: T) -> Result<Self, DistanceError> {
        if k == 0 || l == 0 {
            return Err(DistanceError::Shape { k, l, dim: 0 });
        }
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(DistanceError::Alpha(alpha.as_f64()));
        }
        Ok(IqeShape { k, l, alpha })
    }

    pub fn dim(&self) -> usize {
        self.k * self.l
    }
}

fn same_dim<T>(a: &[T], b: &[T]) -> Result<(), DistanceError> {
    if a.len() != b.len() {
        return Err(DistanceError::Dimension(a.len(), b.len()));
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn squared_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

/// `sqrt(|a|^2 + |b|^2 - a.b)`. The radicand is non-negative analytically; it
/// is clamped at zero to absorb round-off.
pub fn d_hat<T: Scalar>(a: &[T], b: &[T]) -> Result<T, DistanceError> {
    same_dim(a, b)?;
    Ok(d_hat_radicand(a, b).max(T::zero()).sqrt())
}

/// Unclamped radicand of [`d_hat`].
pub fn d_hat_radicand<T: Scalar>(a: &[T], b: &[T]) -> T {
    squared_norm(a) + squared_norm(b) - dot(a, b)
}

/// Angle between two vectors, taken as zero when either one is zero.
fn angle<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = squared_norm(a).sqrt();
    let nb = squared_norm(b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    // 2 atan2(|u - v|, |u + v|) on the unit vectors; exact zero for parallel
    // inputs, unlike acos of a rounded cosine
    let (mut diff, mut sum) = (T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff = diff + (u - v) * (u - v);
        sum = sum + (u + v) * (u + v);
    }
    T::of(2.0) * diff.sqrt().atan2(sum.sqrt())
}

/// `(|a|^2 + |b|^2) / 2 + beta * angle(a, b)`.
pub fn mico_angular<T: Scalar>(a: &[T], b: &[T], beta: T) -> Result<T, DistanceError> {
    same_dim(a, b)?;
    let half = T::of(0.5);
    Ok(half * (squared_norm(a) + squared_norm(b)) + beta * angle(a, b))
}

/// Default `beta` of [`mico_angular`].
pub const MICO_BETA: f64 = 0.1;

/// `1 - cos(angle(a, b))`, in `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T, DistanceError> {
    same_dim(a, b)?;
    let na = squared_norm(a).sqrt();
    let nb = squared_norm(b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(DistanceError::ZeroVector);
    }
    let cos = (dot(a, b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(T::one() - cos)
}

pub fn l1_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T, DistanceError> {
    same_dim(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum())
}

/// Total length of `union_j [start_j, end_j]`. Intervals with `end <= start`
/// contribute nothing.
pub fn interval_union_length<T: Scalar>(intervals: &mut [(T, T)]) -> T {
    intervals.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite endpoints"));
    let mut total = T::zero();
    let mut current: Option<(T, T)> = None;
    for &(lo, hi) in intervals.iter() {
        if hi <= lo {
            continue;
        }
        current = match current {
            Some((cl, ch)) if lo <= ch => Some((cl, ch.max(hi))),
            Some((cl, ch)) => {
                total = total + (ch - cl);
                Some((lo, hi))
            }
            None => Some((lo, hi)),
        };
    }
    if let Some((cl, ch)) = current {
        total = total + (ch - cl);
    }
    total
}

/// Per-component union lengths `d_i = |union_j [a_ij, max(a_ij, b_ij)]|`.
pub fn iqe_components<T: Scalar>(a: &[T], b: &[T], k: usize, l: usize) -> Result<Vec<T>, DistanceError> {
    same_dim(a, b)?;
    if a.len() != k * l {
        return Err(DistanceError::Shape { k, l, dim: a.len() });
    }
    let mut scratch = Vec::with_capacity(l);
    Ok((0..k)
        .map(|i| {
            scratch.clear();
            scratch.extend((i * l..(i + 1) * l).map(|j| (a[j], a[j].max(b[j]))));
            interval_union_length(&mut scratch)
        })
        .collect())
}

/// Interval quasimetric: `alpha * max_i d_i + (1 - alpha) * mean_i d_i`.
/// Not symmetric.
pub fn iqe<T: Scalar>(a: &[T], b: &[T], shape: &IqeShape<T>) -> Result<T, DistanceError> {
    let d = iqe_components(a, b, shape.k, shape.l)?;
    let max = d.iter().fold(T::zero(), |m, &x| m.max(x));
    let mean = d.iter().copied().sum::<T>() / T::of(shape.k as f64);
    Ok(shape.alpha * max + (T::one() - shape.alpha) * mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn d_hat_examples() {
        assert_eq!(d_hat(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(d_hat(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_abs_diff_eq!(d_hat(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(d_hat(&[1.0], &[1.0, 2.0]), Err(DistanceError::Dimension(1, 2)));
    }

    #[test]
    fn mico_angular_examples() {
        assert_abs_diff_eq!(
            mico_angular(&[1.0, 0.0], &[1.0, 0.0], 0.1).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let v = mico_angular(&[1.0, 0.0], &[0.0, 1.0], MICO_BETA).unwrap();
        assert_abs_diff_eq!(v, 1.157_079_632_679_489_7, epsilon = 1e-12);
        assert_eq!(mico_angular(&[0.0, 0.0], &[0.0, 0.0], 0.1).unwrap(), 0.0);
        // parallel vectors whose rounded cosine is not exactly 1
        let a = [0.1f64, 0.2, 0.3];
        let v = mico_angular(&a, &a, 0.1).unwrap();
        assert_eq!(v, a.iter().map(|x| x * x).sum::<f64>());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_distance(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(),
            2.0,
            epsilon = 1e-15
        );
        assert_eq!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DistanceError::ZeroVector)
        );
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn iqe_examples() {
        let shape = IqeShape::new(1, 2, 0.5).unwrap();
        assert_eq!(iqe(&[0.3, -1.0], &[0.3, -1.0], &shape).unwrap(), 0.0);
        assert_eq!(iqe(&[0.0, 0.0], &[1.0, 2.0], &shape).unwrap(), 2.0);
        assert_eq!(iqe(&[1.0, 2.0], &[0.0, 0.0], &shape).unwrap(), 0.0);
        assert!(matches!(
            iqe(&[0.0; 3], &[0.0; 3], &shape),
            Err(DistanceError::Shape { .. })
        ));
        assert!(IqeShape::new(1, 1, 1.5).is_err());
    }

    #[test]
    fn iqe_mixes_max_and_mean() {
        // component 0: [0,1] -> 1; component 1: [0,3] u [5,6] -> 4
        let a = [0.0, 0.0, 0.0, 5.0];
        let b = [1.0, 0.5, 3.0, 6.0];
        let d = iqe_components(&a, &b, 2, 2).unwrap();
        assert_eq!(d, vec![1.0, 4.0]);
        let shape = IqeShape::new(2, 2, 0.25).unwrap();
        assert_abs_diff_eq!(iqe(&a, &b, &shape).unwrap(), 0.25 * 4.0 + 0.75 * 2.5, epsilon = 1e-15);
    }

    #[test]
    fn union_length_overlaps() {
        let mut v = vec![(0.0, 2.0), (1.0, 3.0), (5.0, 5.0), (4.0, 4.5), (2.5, 2.7)];
        assert_abs_diff_eq!(interval_union_length(&mut v), 3.5, epsilon = 1e-15);
        let mut empty: Vec<(f64, f64)> = vec![];
        assert_eq!(interval_union_length(&mut empty), 0.0);
    }

    #[test]
    fn latent_vector_rejects_non_finite() {
        assert!(LatentVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(LatentVector::<f64>::new(vec![]).is_err());
        let v = LatentVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(d_hat(&v, &v).unwrap(), 5.0);
    }

    fn vec16() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 16)
    }

    proptest! {
        #[test]
        fn d_hat_diffuse_axioms(a in vec16(), b in vec16(), c in vec16()) {
            let ab = d_hat(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, d_hat(&b, &a).unwrap());
            prop_assert!(ab + d_hat(&b, &c).unwrap() >= d_hat(&a, &c).unwrap() - 1e-9);
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((d_hat(&a, &a).unwrap() - norm).abs() <= 1e-12);
            prop_assert!(d_hat_radicand(&a, &b) >= -1e-12);
        }

        #[test]
        fn mico_self_distance_is_squared_norm(a in vec16()) {
            let sq = a.iter().map(|x| x * x).sum::<f64>();
            prop_assert!((mico_angular(&a, &a, 0.1).unwrap() - sq).abs() <= 1e-12 * sq.max(1.0));
        }

        #[test]
        fn iqe_quasimetric_axioms(a in vec16(), b in vec16(), c in vec16(), alpha in 0.0f64..=1.0) {
            let shape = IqeShape::new(4, 4, alpha).unwrap();
            let ab = iqe(&a, &b, &shape).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(iqe(&a, &a, &shape).unwrap(), 0.0);
            prop_assert!(ab + iqe(&b, &c, &shape).unwrap() >= iqe(&a, &c, &shape).unwrap() - 1e-9);
        }

        #[test]
        fn l1_symmetric(a in vec16(), b in vec16()) {
            prop_assert_eq!(l1_distance(&a, &b).unwrap(), l1_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn f32_instantiation() {
        let v = d_hat(&[3.0f32, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 5.0f32);
    }
}
