//! Small statistics helpers: normal CDF, one-sample Kolmogorov–Smirnov test and
//! rank correlation.

use crate::error::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // the series below converges too slowly here; the tail is ~1
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sided test of `samples` against a continuous CDF. The p-value uses the
/// asymptotic distribution with Stephens' small-sample correction.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::Empty("KS sample".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
    })
}

pub fn ks_test_standard_normal(samples: &[f64]) -> Result<KsResult> {
    ks_test(samples, normal_cdf)
}

/// 1-based ranks; ties receive the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Empty("correlation needs two points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    #[test]
    fn normal_cdf_values() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_cdf(-1.0), 0.15865525393145707, epsilon = 1e-12);
    }

    #[test]
    fn kolmogorov_critical_values() {
        // tabulated: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01
        assert_abs_diff_eq!(kolmogorov_sf(1.3581), 0.05, epsilon = 1e-4);
        assert_abs_diff_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 1e-4);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_statistic_by_hand() {
        // uniform CDF on [0,1]; samples 0.1, 0.5, 0.6
        let r = ks_test(&[0.6, 0.1, 0.5], |x| x.clamp(0.0, 1.0)).unwrap();
        // gaps: 1/3-0.1, 0.5-1/3, 2/3-0.5, 0.6-2/3 (neg), 1-0.6
        assert_abs_diff_eq!(r.statistic, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn ks_accepts_normal_rejects_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_test_standard_normal(&normal).unwrap().p_value > 0.01);
        let u = Uniform::new(-2.0, 2.0).unwrap();
        let flat: Vec<f64> = (0..20_000).map(|_| u.sample(&mut rng)).collect();
        assert!(ks_test_standard_normal(&flat).unwrap().p_value < 1e-6);
        let scaled: Vec<f64> = normal.iter().map(|v| v * 0.7).collect();
        assert!(ks_test_standard_normal(&scaled).unwrap().p_value < 1e-6);
    }

    #[test]
    fn rank_ties_are_averaged() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        // 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 0, 1, -1, 0)
        assert_abs_diff_eq!(spearman(&x, &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap(), 0.9, epsilon = 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_err());
    }
}
