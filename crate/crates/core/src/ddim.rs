//! Deterministic DDIM sampling and inversion over a uniform step grid.
//!
//! Both directions use the same transfer between cumulative signal levels
//! `a_from = abar[t_from]` and `a_to = abar[t_to]`:
//!
//! ```text
//! x_to = sqrt(a_to) * (x_from - sqrt(1 - a_from) * eps) / sqrt(a_from) + sqrt(1 - a_to) * eps
//! ```
//!
//! Sampling evaluates `eps` at the current latent and `t_from`. Inversion
//! evaluates it at the current latent and the *target* timestep `t_to`, since
//! the latent at `t_to` is not yet known.

use log::warn;
use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnet::EpsModel;
use crate::schedule::NoiseSchedule;

/// The DDIM transfer for a single coordinate with a given noise estimate.
pub fn transfer(x: f64, eps: f64, a_from: f64, a_to: f64) -> f64 {
    a_to.sqrt() * (x - (1.0 - a_from).sqrt() * eps) / a_from.sqrt() + (1.0 - a_to).sqrt() * eps
}

/// Ascending grid `0 = t_0 < t_1 < ... < t_K = T` of `num_steps + 1` uniformly spaced timesteps.
pub fn step_grid(total_steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total_steps {
        return Err(Error::param(
            "inversion.steps",
            format!("must be within 1..={total_steps}, got {num_steps}"),
        ));
    }
    Ok((0..=num_steps)
        .map(|k| (k * total_steps + num_steps / 2) / num_steps)
        .collect())
}

/// Which timestep the noise estimate is evaluated at during inversion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum InversionEval {
    /// Current latent at the target timestep.
    #[default]
    Target,
    /// Current latent at the source timestep (clamped to at least 1).
    Source,
}

fn apply_transfer(x: &Array2<f64>, eps: &Array2<f64>, a_from: f64, a_to: f64) -> Array2<f64> {
    let (ca, cb) = (a_to.sqrt() / a_from.sqrt(), (1.0 - a_from).sqrt());
    let cn = (1.0 - a_to).sqrt();
    let mut out = x.clone();
    ndarray::Zip::from(&mut out)
        .and(eps)
        .for_each(|o, &e| *o = ca * (*o - cb * e) + cn * e);
    out
}

/// One reverse (denoising) step on a batch of latents.
pub fn ddim_step_batch(
    model: &impl EpsModel,
    x: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t_from > sched.total_steps() || t_to > t_from {
        return Err(Error::TimestepOrder { from: t_from, to: t_to });
    }
    if t_from == t_to {
        return Ok(x.to_owned());
    }
    let ts = vec![t_from; x.nrows()];
    let eps = model.predict_batch(x, cond, &ts)?;
    Ok(apply_transfer(&x.to_owned(), &eps, sched.alpha_bar(t_from), sched.alpha_bar(t_to)))
}

/// One inversion step (towards noise) on a batch of latents.
pub fn ddim_invert_step_batch(
    model: &impl EpsModel,
    x: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
    eval: InversionEval,
) -> Result<Array2<f64>> {
    if t_to > sched.total_steps() || t_from > t_to {
        return Err(Error::TimestepOrder { from: t_from, to: t_to });
    }
    if t_from == t_to {
        return Ok(x.to_owned());
    }
    let a_from = sched.alpha_bar(t_from);
    if a_from <= 0.0 {
        return Err(Error::Degenerate(format!("alpha_bar[{t_from}] = 0")));
    }
    let t_eval = match eval {
        InversionEval::Target => t_to,
        InversionEval::Source => t_from.max(1),
    };
    let eps = model.predict_batch(x, cond, &vec![t_eval; x.nrows()])?;
    Ok(apply_transfer(&x.to_owned(), &eps, a_from, sched.alpha_bar(t_to)))
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row view")
}

pub fn ddim_step(
    model: &impl EpsModel,
    x: &[f64],
    cond: &[f64],
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    Ok(ddim_step_batch(model, row(x), row(cond), t_from, t_to, sched)?
        .into_raw_vec_and_offset()
        .0)
}

pub fn ddim_invert_step(
    model: &impl EpsModel,
    x: &[f64],
    cond: &[f64],
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    Ok(
        ddim_invert_step_batch(model, row(x), row(cond), t_from, t_to, sched, InversionEval::Target)?
            .into_raw_vec_and_offset()
            .0,
    )
}

/// Denoises from `grid.last()` down to `grid[0]`. `cond_at(k)` gives the
/// condition batch for the `k`-th executed step (0 = the step leaving `T`).
pub fn sample_with<'c>(
    model: &impl EpsModel,
    z: Array2<f64>,
    grid: &[usize],
    sched: &NoiseSchedule,
    mut cond_at: impl FnMut(usize) -> ArrayView2<'c, f64>,
) -> Result<Array2<f64>> {
    let mut x = z;
    for (k, pair) in grid.windows(2).rev().enumerate() {
        x = ddim_step_batch(model, x.view(), cond_at(k), pair[1], pair[0], sched)?;
    }
    Ok(x)
}

/// Denoising with a single condition per row for every step.
pub fn sample(
    model: &impl EpsModel,
    z: Array2<f64>,
    cond: ArrayView2<'_, f64>,
    grid: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sample_with(model, z, grid, sched, |_| cond)
}

/// Inverts clean latents up the grid to `grid.last()`.
pub fn invert(
    model: &impl EpsModel,
    x0: Array2<f64>,
    cond: ArrayView2<'_, f64>,
    grid: &[usize],
    sched: &NoiseSchedule,
    eval: InversionEval,
) -> Result<Array2<f64>> {
    let mut x = x0;
    for pair in grid.windows(2) {
        x = ddim_invert_step_batch(model, x.view(), cond, pair[0], pair[1], sched, eval)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentInversion {
    pub latent: Vec<f64>,
    pub source_image_id: usize,
    pub category_id: usize,
    pub prompt_hash: String,
    pub num_steps: usize,
    pub schedule_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionPool {
    pub category_id: usize,
    pub entries: Vec<LatentInversion>,
}

impl InversionPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that all entries share category, prompt and schedule.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.entries.first() else {
            return Ok(());
        };
        for e in &self.entries {
            if e.category_id != self.category_id
                || e.prompt_hash != first.prompt_hash
                || e.schedule_hash != first.schedule_hash
            {
                return Err(Error::param(
                    "pool",
                    format!("entry for image {} is inconsistent with the pool", e.source_image_id),
                ));
            }
            if e.latent.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("pool entry {}", e.source_image_id)));
            }
        }
        Ok(())
    }
}

pub fn prompt_hash(cond: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in cond {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Inverts every `(image_id, latent)` of one category under the plain prompt.
/// Images whose trajectory turns non-finite are dropped with a warning.
pub fn build_inversion_pool(
    images: &[(usize, &[f64])],
    category_id: usize,
    cond: &[f64],
    model: &impl EpsModel,
    sched: &NoiseSchedule,
    num_steps: usize,
    eval: InversionEval,
) -> Result<InversionPool> {
    if images.is_empty() {
        return Err(Error::Empty(format!("category {category_id} has no images to invert")));
    }
    let grid = step_grid(sched.total_steps(), num_steps)?;
    let d = images[0].1.len();
    let mut x0 = Array2::zeros((images.len(), d));
    for (i, (_, img)) in images.iter().enumerate() {
        if img.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: img.len() });
        }
        x0.row_mut(i).assign(&ndarray::aview1(img));
    }
    let conds = Array2::from_shape_fn((images.len(), cond.len()), |(_, j)| cond[j]);
    let latents = invert(model, x0, conds.view(), &grid, sched, eval)?;
    let prompt = prompt_hash(cond);
    let schedule = sched.hash();
    let mut entries = Vec::with_capacity(images.len());
    for (i, (id, _)) in images.iter().enumerate() {
        let latent = latents.row(i).to_vec();
        if latent.iter().any(|v| !v.is_finite()) {
            warn!("dropping image {id} of category {category_id}: inversion is not finite");
            continue;
        }
        entries.push(LatentInversion {
            latent,
            source_image_id: *id,
            category_id,
            prompt_hash: prompt.clone(),
            num_steps,
            schedule_hash: schedule.clone(),
        });
    }
    if entries.is_empty() {
        return Err(Error::NonFinite(format!("every inversion of category {category_id}")));
    }
    Ok(InversionPool { category_id, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Noise estimate independent of the latent: a fixed function of (t, coordinate, cond).
    struct FrozenNoise;

    impl EpsModel for FrozenNoise {
        fn predict_batch(&self, x: ArrayView2<'_, f64>, cond: ArrayView2<'_, f64>, ts: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(x.dim(), |(i, j)| {
                ((ts[i] as f64) * 0.013 + j as f64 * 0.7 + cond[[i, 0]]).sin()
            }))
        }
    }

    struct Zero;

    impl EpsModel for Zero {
        fn predict_batch(&self, x: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>, _: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::zeros(x.dim()))
        }
    }

    struct Const(f64);

    impl EpsModel for Const {
        fn predict_batch(&self, x: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>, _: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(x.dim(), self.0))
        }
    }

    #[test]
    fn scalar_transfer_matches_direct_evaluation() {
        // a_from = 0.25, a_to = 0.81, x = 1, eps = 0.5
        let direct = 0.9 * (1.0 - 0.5 * 0.75f64.sqrt()) / 0.5 + 0.19f64.sqrt() * 0.5;
        assert_abs_diff_eq!(transfer(1.0, 0.5, 0.25, 0.81), direct, epsilon = 1e-15);
        assert_abs_diff_eq!(direct, 1.238522, epsilon = 1e-6);
    }

    #[test]
    fn scalar_step_through_model() {
        let sched = NoiseSchedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert_abs_diff_eq!(sched.alpha_bar(1), 0.81, epsilon = 1e-12);
        assert_abs_diff_eq!(sched.alpha_bar(2), 0.25, epsilon = 1e-12);
        let out = ddim_step(&Const(0.5), &[1.0], &[0.0], 2, 1, &sched).unwrap();
        assert_abs_diff_eq!(out[0], 1.238522, epsilon = 1e-6);
    }

    #[test]
    fn zero_predictor_scales_by_signal_ratio() {
        let sched = NoiseSchedule::default();
        let x = [0.4, -1.2];
        let down = ddim_step(&Zero, &x, &[0.0], 700, 300, &sched).unwrap();
        let up = ddim_invert_step(&Zero, &x, &[0.0], 300, 700, &sched).unwrap();
        let r = (sched.alpha_bar(300) / sched.alpha_bar(700)).sqrt();
        for i in 0..2 {
            assert_abs_diff_eq!(down[i], r * x[i], epsilon = 1e-12);
            assert_abs_diff_eq!(up[i], x[i] / r, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_timesteps_are_identity() {
        let sched = NoiseSchedule::default();
        let x = [0.4, -1.2];
        assert_eq!(ddim_step(&FrozenNoise, &x, &[0.0], 500, 500, &sched).unwrap(), x);
    }

    #[test]
    fn order_violations_are_rejected() {
        let sched = NoiseSchedule::default();
        assert!(matches!(
            ddim_step(&Zero, &[0.0], &[0.0], 300, 700, &sched),
            Err(Error::TimestepOrder { .. })
        ));
        assert!(matches!(
            ddim_invert_step(&Zero, &[0.0], &[0.0], 700, 300, &sched),
            Err(Error::TimestepOrder { .. })
        ));
        assert!(ddim_step(&Zero, &[0.0], &[0.0], 1001, 3, &sched).is_err());
    }

    #[test]
    fn invert_then_step_with_constant_noise() {
        let sched = NoiseSchedule::default();
        let x = [0.3, -0.8, 1.5];
        let up = ddim_invert_step(&Const(0.37), &x, &[0.0], 120, 480, &sched).unwrap();
        let back = ddim_step(&Const(0.37), &up, &[0.0], 480, 120, &sched).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], x[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn grid_is_uniform_and_reversible() {
        let g = step_grid(1000, 50).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0);
        assert_eq!(g[50], 1000);
        assert!(g.windows(2).all(|w| w[1] - w[0] == 20));
        let g = step_grid(1000, 7).unwrap();
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(step_grid(10, 0).is_err());
        assert!(step_grid(10, 11).is_err());
    }

    #[test]
    fn sampler_visits_reverse_of_inversion_grid() {
        use std::cell::RefCell;
        struct Recorder(RefCell<Vec<usize>>);
        impl EpsModel for Recorder {
            fn predict_batch(&self, x: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>, ts: &[usize]) -> Result<Array2<f64>> {
                self.0.borrow_mut().push(ts[0]);
                Ok(Array2::zeros(x.dim()))
            }
        }
        let sched = NoiseSchedule::default();
        let grid = step_grid(1000, 10).unwrap();
        let cond = Array2::zeros((1, 1));
        let rec = Recorder(RefCell::new(Vec::new()));
        invert(&rec, Array2::zeros((1, 2)), cond.view(), &grid, &sched, InversionEval::Target).unwrap();
        let inverted = rec.0.replace(Vec::new());
        sample(&rec, Array2::zeros((1, 2)), cond.view(), &grid, &sched).unwrap();
        let mut sampled = rec.0.into_inner();
        sampled.reverse();
        assert_eq!(inverted, grid[1..].to_vec());
        assert_eq!(sampled, grid[1..].to_vec());
    }

    #[test]
    fn single_image_pool() {
        let sched = NoiseSchedule::default();
        let img = vec![0.1; 4];
        let pool = build_inversion_pool(&[(7, &img)], 2, &[0.5], &FrozenNoise, &sched, 10, InversionEval::Target).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.entries[0].source_image_id, 7);
        assert_eq!(pool.entries[0].category_id, 2);
        pool.validate().unwrap();
        assert!(build_inversion_pool(&[], 2, &[0.5], &FrozenNoise, &sched, 10, InversionEval::Target).is_err());
    }
}
