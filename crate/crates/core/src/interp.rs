//! Rotation of one latent towards or away from another along the great circle
//! through both.
//!
//! With `alpha` the angle between `a` and `b`, the unified form
//!
//! ```text
//! z(lambda) = sin((1 + lambda) alpha) / sin alpha * a - sin(lambda alpha) / sin alpha * b
//! ```
//!
//! traces the full circle for `lambda` in `[0, 2 pi / alpha]`. The segment
//! `[0, 2 pi / alpha - 1]` rotates away from `b` (extrapolation) and the rest
//! is the shortest arc from `b` back to `a` (slerp run backwards).

use std::f64::consts::PI;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};

/// Angles closer than this to 0 or pi are treated as degenerate.
pub const DEGENERATE_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpKind {
    Interpolation,
    Extrapolation,
}

impl InterpKind {
    pub fn classify(lambda: f64, alpha: f64) -> Self {
        if lambda >= 2.0 * PI / alpha - 1.0 {
            InterpKind::Interpolation
        } else {
            InterpKind::Extrapolation
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterpKind::Interpolation => "interpolation",
            InterpKind::Extrapolation => "extrapolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpSample {
    pub z: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    /// Pool indices of `a` and `b`.
    pub pair: (usize, usize),
    pub kind: InterpKind,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Angle in `[0, pi]` between two nonzero vectors.
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("angle with a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

pub fn is_degenerate(alpha: f64) -> bool {
    !(DEGENERATE_ANGLE..=PI - DEGENERATE_ANGLE).contains(&alpha)
}

fn combine(a: &[f64], b: &[f64], ca: f64, cb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

/// Unified rotation; degenerate pairs return `a` unchanged with a warning.
pub fn circle_interpolate(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let alpha = angle_between(a, b)?;
    if is_degenerate(alpha) {
        warn!("degenerate pair (alpha = {alpha:.3e}), returning the first latent");
        return Ok(a.to_vec());
    }
    let full = 2.0 * PI / alpha;
    if !(0.0..=full).contains(&lambda) {
        return Err(Error::param("lambda", format!("{lambda} outside [0, {full}]")));
    }
    let s = alpha.sin();
    Ok(combine(a, b, ((1.0 + lambda) * alpha).sin() / s, -(lambda * alpha).sin() / s))
}

/// Shortest-arc interpolation, `lambda` in `[0, 1]`.
pub fn slerp(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param("lambda", format!("{lambda} outside [0, 1]")));
    }
    let alpha = angle_between(a, b)?;
    if is_degenerate(alpha) {
        warn!("degenerate pair (alpha = {alpha:.3e}), returning the first latent");
        return Ok(a.to_vec());
    }
    let s = alpha.sin();
    Ok(combine(a, b, ((1.0 - lambda) * alpha).sin() / s, (lambda * alpha).sin() / s))
}

/// Rotation away from `b`, `lambda` in `[0, 2 pi / alpha - 1]`.
pub fn spherical_extrapolate(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let alpha = angle_between(a, b)?;
    if !is_degenerate(alpha) {
        let max = 2.0 * PI / alpha - 1.0;
        if !(0.0..=max).contains(&lambda) {
            return Err(Error::param("lambda", format!("{lambda} outside [0, {max}]")));
        }
    }
    circle_interpolate(a, b, lambda)
}

/// Straight-line mixing `(1 - w) a + w b`.
pub fn linear(a: &[f64], b: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    Ok(combine(a, b, 1.0 - w, w))
}

/// Uniform strength over the full circle.
pub fn sample_strength(rng: &mut impl Rng, alpha: f64) -> Result<(f64, InterpKind)> {
    if is_degenerate(alpha) {
        return Err(Error::Degenerate(format!("alpha = {alpha:.3e}")));
    }
    let u: f64 = rng.random();
    Ok(strength_from_unit(u, alpha))
}

pub fn strength_from_unit(u: f64, alpha: f64) -> (f64, InterpKind) {
    let lambda = u * 2.0 * PI / alpha;
    (lambda, InterpKind::classify(lambda, alpha))
}

/// Draws a strength for the pair and rotates.
pub fn sample_pair(a: &[f64], b: &[f64], pair: (usize, usize), rng: &mut impl Rng) -> Result<InterpSample> {
    let alpha = angle_between(a, b)?;
    if is_degenerate(alpha) {
        warn!("degenerate pair {pair:?}, returning the first latent");
        return Ok(InterpSample {
            z: a.to_vec(),
            lambda: 0.0,
            alpha,
            pair,
            kind: InterpKind::Extrapolation,
        });
    }
    let (lambda, kind) = sample_strength(rng, alpha)?;
    Ok(InterpSample {
        z: circle_interpolate(a, b, lambda)?,
        lambda,
        alpha,
        pair,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        let scale = norm(b).max(1.0);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * scale, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn angles() {
        assert_abs_diff_eq!(angle_between(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), PI / 2.0, epsilon = 1e-15);
        assert_eq!(angle_between(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(angle_between(&[1.0, 0.0], &[h, h]).unwrap(), PI / 4.0, epsilon = 1e-12);
        assert!(angle_between(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(angle_between(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn circle_endpoints_and_quarter_turn() {
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        close(&circle_interpolate(&a, &b, 0.0).unwrap(), &a, 1e-12);
        close(&circle_interpolate(&a, &b, 4.0).unwrap(), &a, 1e-12);
        close(&circle_interpolate(&a, &b, 1.0).unwrap(), &[0.0, -1.0], 1e-12);
        close(&circle_interpolate(&a, &b, 3.0).unwrap(), &b, 1e-12);
        assert!(circle_interpolate(&a, &b, 4.5).is_err());
        assert!(circle_interpolate(&a, &b, -0.1).is_err());
    }

    #[test]
    fn slerp_midpoint() {
        let h = 0.5f64.sqrt();
        close(&slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), &[h, h], 1e-12);
        close(&slerp(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), &[0.0, 1.0], 1e-12);
        assert!(slerp(&[1.0, 0.0], &[0.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn extrapolation_range() {
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        close(&spherical_extrapolate(&a, &b, 3.0).unwrap(), &b, 1e-12);
        assert!(spherical_extrapolate(&a, &b, 3.01).is_err());
    }

    #[test]
    fn degenerate_pairs_return_first() {
        let a = [0.2, -0.4, 1.0];
        assert_eq!(circle_interpolate(&a, &a, 2.0).unwrap(), a);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(slerp(&a, &neg, 0.5).unwrap(), a);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_strength(&mut rng, 0.0).is_err());
        assert_eq!(sample_pair(&a, &a, (0, 1), &mut rng).unwrap().z, a);
    }

    #[test]
    fn strength_boundary_at_right_angle() {
        let alpha = PI / 2.0;
        assert_eq!(strength_from_unit(0.0, alpha), (0.0, InterpKind::Extrapolation));
        assert_abs_diff_eq!(strength_from_unit(1.0, alpha).0, 4.0, epsilon = 1e-12);
        assert_eq!(strength_from_unit(0.7499, alpha).1, InterpKind::Extrapolation);
        assert_eq!(strength_from_unit(0.75, alpha).1, InterpKind::Interpolation);
        assert_eq!(strength_from_unit(0.9, alpha).1, InterpKind::Interpolation);
    }

    #[test]
    fn linear_midpoint() {
        assert_eq!(linear(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        proptest::collection::vec(-1.0f64..1.0, 8)
            .prop_flat_map(|a| (Just(a), proptest::collection::vec(-1.0f64..1.0, 8)))
            .prop_filter("non-degenerate", |(a, b)| {
                norm(a) > 0.1 && norm(b) > 0.1 && angle_between(a, b).map(|t| !is_degenerate(t)).unwrap_or(false)
            })
    }

    proptest! {
        #[test]
        fn slerp_is_circle_read_backwards((a, b) in pair_strategy(), lam in 0.0f64..=1.0) {
            let alpha = angle_between(&a, &b).unwrap();
            let s = slerp(&a, &b, lam).unwrap();
            let c = circle_interpolate(&a, &b, 2.0 * PI / alpha - lam).unwrap();
            let scale = norm(&a).max(norm(&b));
            for (x, y) in s.iter().zip(&c) {
                prop_assert!((x - y).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn equal_norms_are_preserved((a, b) in pair_strategy(), u in 0.0f64..=1.0) {
            let scale = norm(&a) / norm(&b);
            let b: Vec<f64> = b.iter().map(|v| v * scale).collect();
            let alpha = angle_between(&a, &b).unwrap();
            let z = circle_interpolate(&a, &b, u * 2.0 * PI / alpha).unwrap();
            prop_assert!((norm(&z) - norm(&a)).abs() <= 1e-8 * norm(&a));
        }
    }
}
