//! Discrete noise schedule and the closed-form forward (noising) process.
//!
//! `alpha_bars[0] = 1` so that timestep 0 is clean data and timesteps
//! `1..=T` index the noised states.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("schedule.steps", "must be at least 1"));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::param("schedule.beta", "betas must be finite"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(
                "schedule.beta",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + span * i as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule.betas", "empty"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("schedule.betas", format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::param("schedule.betas", "alpha_bar underflows to zero"));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal coefficients, indexed `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.total_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(t)?;
        if x0.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                actual: eps.len(),
            });
        }
        let (signal, noise) = self.coefficients(t);
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| signal * x + noise * e)
            .collect())
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Hex digest of the betas, used to tag artifacts computed under this schedule.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn default_terminal_alpha_bar() {
        // Reference: prod(1 - linspace(1e-4, 0.02, 1000)) in double precision.
        let s = NoiseSchedule::default();
        let reference: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert_abs_diff_eq!(s.alpha_bar(1000), reference, epsilon = 1e-15);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn strictly_decreasing() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(50) > 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, f64::INFINITY).is_err());
    }

    #[test]
    fn forward_noise_special_cases() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.7, 1.0];
        let zero = [0.0; 3];
        let eps = [1.0, 2.0, -1.0];
        let (a, b) = s.coefficients(250);
        let only_signal = s.forward_noise(&x0, 250, &zero).unwrap();
        let only_noise = s.forward_noise(&zero, 250, &eps).unwrap();
        for i in 0..3 {
            assert_eq!(only_signal[i], a * x0[i]);
            assert_eq!(only_noise[i], b * eps[i]);
        }
    }

    #[test]
    fn forward_noise_scalar_value() {
        // A schedule whose first alpha_bar is 0.25.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = s.forward_noise(&[1.0], 1, &[1.0]).unwrap();
        assert_abs_diff_eq!(out[0], 0.5 + 0.75f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 1.36603, epsilon = 1e-5);
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::default();
        assert!(matches!(
            s.forward_noise(&[0.0; 2], 3, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            s.forward_noise(&[0.0], 0, &[0.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            s.forward_noise(&[0.0], 1001, &[0.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn forward_noise_is_linear() {
        let s = NoiseSchedule::default();
        let x = [0.2, -1.3, 0.5];
        let y = [1.1, 0.4, -0.9];
        let e1 = [0.3, 0.3, -2.0];
        let e2 = [-0.5, 1.7, 0.1];
        let k = 2.5;
        let sum_x: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let sum_e: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
        let lhs = s.forward_noise(&sum_x, 400, &sum_e).unwrap();
        let a = s.forward_noise(&x, 400, &e1).unwrap();
        let b = s.forward_noise(&y, 400, &e2).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(lhs[i], a[i] + b[i], epsilon = 1e-12);
        }
        let scaled_x: Vec<f64> = x.iter().map(|v| v * k).collect();
        let scaled_e: Vec<f64> = e1.iter().map(|v| v * k).collect();
        let lhs = s.forward_noise(&scaled_x, 400, &scaled_e).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(lhs[i], k * a[i], epsilon = 1e-12);
        }
    }
}
