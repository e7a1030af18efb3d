//! Synthetic sample generation: suffix vocabularies, two-stage denoising and
//! per-category expansion of an inversion pool.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::concepts::Phrase;
use crate::datio::pgm;
use crate::ddim::{ddim_step_batch, step_grid, InversionPool};
use crate::error::{Error, Result};
use crate::interp::{self, InterpKind};
use crate::nnet::EpsModel;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStageConfig {
    pub split_ratio: f64,
    pub num_steps: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.3,
            num_steps: 50,
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::param("synthesis.split_ratio", format!("{} outside [0, 1]", self.split_ratio)));
        }
        if self.num_steps == 0 {
            return Err(Error::param("inversion.steps", "must be positive"));
        }
        Ok(())
    }

    /// Number of leading (high-noise) steps that use the suffixed prompt.
    pub fn suffixed_steps(&self) -> usize {
        ((self.split_ratio * self.num_steps as f64 - 1e-9).ceil().max(0.0) as usize).min(self.num_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Static,
    External,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Static => "static",
            Provenance::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuffixVocabulary {
    pub phrases: Vec<Phrase>,
    pub provenance: Provenance,
}

impl SuffixVocabulary {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// One suffix per distinct tag, in first-seen order.
pub fn static_suffix_provider(tags: &[String], dim: usize) -> Result<SuffixVocabulary> {
    let mut phrases: Vec<Phrase> = Vec::new();
    for t in tags {
        if !phrases.iter().any(|p| &p.text == t) {
            phrases.push(Phrase::new(t.clone(), dim));
        }
    }
    if phrases.is_empty() {
        return Err(Error::Empty("suffix tag list".into()));
    }
    Ok(SuffixVocabulary {
        phrases,
        provenance: Provenance::Static,
    })
}

/// A service that condenses captions into a few prompt phrases.
pub trait Summarizer {
    /// Returns the raw response body.
    fn summarize(&self, captions: &[String]) -> Result<String>;
}

/// Posts `{"captions": [...]}` as JSON and expects `{"phrases": [...]}` back.
#[derive(Debug, Clone)]
pub struct HttpSummarizer {
    pub endpoint: String,
    pub timeout: Duration,
}

impl HttpSummarizer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
        }
    }
}

impl Summarizer for HttpSummarizer {
    fn summarize(&self, captions: &[String]) -> Result<String> {
        let body = serde_json::json!({ "captions": captions }).to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Error::Service(format!("{}: {e}", self.endpoint)))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Service(format!("{}: {e}", self.endpoint)))
    }
}

/// Extracts the suffixes from a `{"phrases": [...]}` body whose entries read
/// `a photo of a <metaclass> <suffix>`.
pub fn parse_summary(body: &str, metaclass: &str) -> Result<Vec<String>> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Parse(format!("summary is not JSON: {e}")))?;
    let list = value
        .get("phrases")
        .and_then(|p| p.as_array())
        .ok_or_else(|| Error::Parse("summary lacks a `phrases` array".into()))?;
    let prefix = format!("a photo of a {metaclass} ");
    let mut out = Vec::new();
    for item in list {
        let text = item
            .as_str()
            .ok_or_else(|| Error::Parse("phrase is not a string".into()))?;
        let suffix = text
            .trim()
            .strip_prefix(&prefix)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse(format!("phrase `{text}` does not match `{prefix}<suffix>`")))?;
        if !out.iter().any(|s| s == suffix) {
            out.push(suffix.to_string());
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("summary has no phrases".into()));
    }
    Ok(out)
}

/// Queries `client` for suffixes. On failure falls back to the static
/// provider over `fallback_tags` when given, otherwise returns the error.
pub fn external_suffix_provider(
    client: &dyn Summarizer,
    captions: &[String],
    metaclass: &str,
    dim: usize,
    fallback_tags: Option<&[String]>,
) -> Result<SuffixVocabulary> {
    let fetched = if captions.is_empty() {
        Err(Error::Empty("caption list".into()))
    } else {
        client
            .summarize(captions)
            .and_then(|body| parse_summary(&body, metaclass))
    };
    match (fetched, fallback_tags) {
        (Ok(suffixes), _) => Ok(SuffixVocabulary {
            phrases: suffixes.into_iter().map(|s| Phrase::new(s, dim)).collect(),
            provenance: Provenance::External,
        }),
        (Err(e), Some(tags)) => {
            warn!("suffix service failed ({e}); using the static vocabulary");
            static_suffix_provider(tags, dim)
        }
        (Err(e), None) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPrompt {
    Suffixed,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub t_from: usize,
    pub t_to: usize,
    pub prompt: StepPrompt,
}

/// Denoises each row of `z` from `T` to 0. The first
/// [`TwoStageConfig::suffixed_steps`] steps use the `suffixed` condition rows,
/// the rest use `plain`.
pub fn two_stage_denoise(
    model: &impl EpsModel,
    z: Array2<f64>,
    plain: &Array2<f64>,
    suffixed: &Array2<f64>,
    cfg: &TwoStageConfig,
    sched: &NoiseSchedule,
) -> Result<(Array2<f64>, Vec<StepRecord>)> {
    cfg.validate()?;
    let grid = step_grid(sched.total_steps(), cfg.num_steps)?;
    let first = cfg.suffixed_steps();
    let mut x = z;
    let mut log = Vec::with_capacity(cfg.num_steps);
    for (k, pair) in grid.windows(2).rev().enumerate() {
        let (prompt, cond) = if k < first {
            (StepPrompt::Suffixed, suffixed)
        } else {
            (StepPrompt::Plain, plain)
        };
        x = ddim_step_batch(model, x.view(), cond.view(), pair[1], pair[0], sched)?;
        log.push(StepRecord {
            t_from: pair[1],
            t_to: pair[0],
            prompt,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoised sample".into()));
    }
    Ok((x, log))
}

/// How starting latents are formed from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    /// Uniform strength over the full circle.
    Circle,
    /// Shortest arc only.
    Slerp,
    /// Opposite arc only.
    Extrapolate,
    /// Straight-line mixing.
    Linear,
    /// A single pool latent, no mixing.
    Reconstruction,
}

impl InterpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InterpMode::Circle => "circle",
            InterpMode::Slerp => "slerp",
            InterpMode::Extrapolate => "extrapolate",
            InterpMode::Linear => "linear",
            InterpMode::Reconstruction => "reconstruction",
        }
    }
}

impl std::str::FromStr for InterpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "circle" => InterpMode::Circle,
            "slerp" => InterpMode::Slerp,
            "extrapolate" => InterpMode::Extrapolate,
            "linear" => InterpMode::Linear,
            "reconstruction" => InterpMode::Reconstruction,
            _ => return Err(Error::param("synthesis.interp", format!("unknown mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub two_stage: TwoStageConfig,
    pub expansion: usize,
    pub mode: InterpMode,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        self.two_stage.validate()?;
        if self.expansion == 0 {
            return Err(Error::param("synthesis.expansion", "must be at least 1"));
        }
        Ok(())
    }
}

/// How a sample's starting latent was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Interpolation,
    Extrapolation,
    Linear,
    Reconstruction,
    Noise,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Interpolation => "interpolation",
            Origin::Extrapolation => "extrapolation",
            Origin::Linear => "linear",
            Origin::Reconstruction => "reconstruction",
            Origin::Noise => "noise",
        }
    }
}

impl From<InterpKind> for Origin {
    fn from(k: InterpKind) -> Self {
        match k {
            InterpKind::Interpolation => Origin::Interpolation,
            InterpKind::Extrapolation => Origin::Extrapolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Vec<f64>,
    pub category_id: usize,
    /// Source image ids of the pair; both equal for reconstructions, absent for noise.
    pub pair: Option<(usize, usize)>,
    pub lambda: f64,
    pub alpha: f64,
    pub origin: Origin,
    pub suffix_id: Option<usize>,
    pub split_ratio: f64,
    /// Seed of this sample's private generator.
    pub seed: u64,
}

/// Seed of the `index`-th sample of `category` under run seed `seed`.
pub fn sample_seed(seed: u64, category: usize, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((category as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Start {
    z: Vec<f64>,
    pair: Option<(usize, usize)>,
    lambda: f64,
    alpha: f64,
    origin: Origin,
}

fn draw_start(pool: &InversionPool, mode: InterpMode, rng: &mut ChaCha8Rng) -> Result<Start> {
    let n = pool.len();
    let d = pool.entries[0].latent.len();
    if n == 1 {
        return Ok(Start {
            z: (0..d).map(|_| StandardNormal.sample(rng)).collect(),
            pair: None,
            lambda: 0.0,
            alpha: 0.0,
            origin: Origin::Noise,
        });
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (&pool.entries[i], &pool.entries[j]);
    let ids = (a.source_image_id, b.source_image_id);
    if mode == InterpMode::Reconstruction {
        return Ok(Start {
            z: a.latent.clone(),
            pair: Some((ids.0, ids.0)),
            lambda: 0.0,
            alpha: 0.0,
            origin: Origin::Reconstruction,
        });
    }
    let alpha = interp::angle_between(&a.latent, &b.latent)?;
    let u: f64 = rng.random();
    let (z, lambda, origin) = if interp::is_degenerate(alpha) {
        warn!("degenerate pair {ids:?} in category {}", pool.category_id);
        (a.latent.clone(), 0.0, Origin::Reconstruction)
    } else {
        match mode {
            InterpMode::Circle => {
                let (lambda, kind) = interp::strength_from_unit(u, alpha);
                (interp::circle_interpolate(&a.latent, &b.latent, lambda)?, lambda, kind.into())
            }
            InterpMode::Slerp => (interp::slerp(&a.latent, &b.latent, u)?, u, Origin::Interpolation),
            InterpMode::Extrapolate => {
                let lambda = u * (2.0 * std::f64::consts::PI / alpha - 1.0);
                (
                    interp::spherical_extrapolate(&a.latent, &b.latent, lambda)?,
                    lambda,
                    Origin::Extrapolation,
                )
            }
            InterpMode::Linear => (interp::linear(&a.latent, &b.latent, u)?, u, Origin::Linear),
            InterpMode::Reconstruction => unreachable!(),
        }
    };
    Ok(Start {
        z,
        pair: Some(ids),
        lambda,
        alpha,
        origin,
    })
}

/// Produces `expansion × pool.len()` samples for one category.
///
/// `plain` is the category's plain condition; `suffixed[k]` is its condition
/// with suffix `k`. With an empty `suffixed` list every step uses `plain`.
/// Each sample draws from its own generator seeded by [`sample_seed`]: a pair,
/// a strength, then a suffix. Singleton pools start from fresh noise.
pub fn synthesize_category(
    model: &impl EpsModel,
    pool: &InversionPool,
    plain: &[f64],
    suffixed: &[Vec<f64>],
    cfg: &SynthesisConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty(format!("inversion pool of category {}", pool.category_id)));
    }
    let count = cfg.expansion * pool.len();
    let d = pool.entries[0].latent.len();
    let c = plain.len();
    let mut z = Array2::zeros((count, d));
    let mut plain_rows = Array2::zeros((count, c));
    let mut suffixed_rows = Array2::zeros((count, c));
    let mut meta = Vec::with_capacity(count);
    for k in 0..count {
        let seed = sample_seed(cfg.seed, pool.category_id, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = draw_start(pool, cfg.mode, &mut rng)?;
        let suffix_id = (!suffixed.is_empty()).then(|| rng.random_range(0..suffixed.len()));
        z.row_mut(k).assign(&ndarray::aview1(&start.z));
        plain_rows.row_mut(k).assign(&ndarray::aview1(plain));
        let cs = suffix_id.map_or(plain, |s| suffixed[s].as_slice());
        if cs.len() != c {
            return Err(Error::DimensionMismatch { expected: c, actual: cs.len() });
        }
        suffixed_rows.row_mut(k).assign(&ndarray::aview1(cs));
        meta.push((start, suffix_id, seed));
    }
    let mut two_stage = cfg.two_stage;
    if suffixed.is_empty() {
        two_stage.split_ratio = 0.0;
    }
    let (x, _) = two_stage_denoise(model, z, &plain_rows, &suffixed_rows, &two_stage, sched)?;
    Ok(meta
        .into_iter()
        .enumerate()
        .map(|(k, (start, suffix_id, seed))| SyntheticSample {
            image: x.row(k).to_vec(),
            category_id: pool.category_id,
            pair: start.pair,
            lambda: start.lambda,
            alpha: start.alpha,
            origin: start.origin,
            suffix_id,
            split_ratio: two_stage.split_ratio,
            seed,
        })
        .collect())
}

pub const METADATA_HEADER: &str = "sample_id,category,pair_a,pair_b,lambda,alpha,kind,suffix_id,split_ratio,seed";

pub fn metadata_csv(samples: &[SyntheticSample]) -> String {
    let mut out = String::from(METADATA_HEADER);
    out.push('\n');
    for (id, s) in samples.iter().enumerate() {
        let (a, b) = s
            .pair
            .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        let suffix = s.suffix_id.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{id},{},{a},{b},{:.6},{:.6},{},{suffix},{},{}",
            s.category_id,
            s.lambda,
            s.alpha,
            s.origin.as_str(),
            s.split_ratio,
            s.seed
        );
    }
    out
}

/// Writes one PGM per sample plus `metadata.csv` into `dir`.
pub fn write_synthetic_set(dir: &Path, samples: &[SyntheticSample], width: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, s) in samples.iter().enumerate() {
        let height = s.image.len() / width.max(1);
        pgm::write(&dir.join(format!("sample_{id:05}.pgm")), &s.image, width, height)?;
    }
    fs::write(dir.join("metadata.csv"), metadata_csv(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::{sample, LatentInversion};
    use ndarray::ArrayView2;

    struct Toy;

    impl EpsModel for Toy {
        fn predict_batch(&self, x: ArrayView2<'_, f64>, cond: ArrayView2<'_, f64>, ts: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(x.dim(), |(i, j)| {
                0.3 * x[[i, j]] + cond[[i, j % cond.ncols()]] * (ts[i] as f64 / 1000.0)
            }))
        }
    }

    fn pool(n: usize) -> InversionPool {
        InversionPool {
            category_id: 3,
            entries: (0..n)
                .map(|i| LatentInversion {
                    latent: (0..6).map(|j| ((i * 7 + j) as f64).sin()).collect(),
                    source_image_id: 10 + i,
                    category_id: 3,
                    prompt_hash: "p".into(),
                    num_steps: 10,
                    schedule_hash: "s".into(),
                })
                .collect(),
        }
    }

    fn cfg(s: f64) -> SynthesisConfig {
        SynthesisConfig {
            two_stage: TwoStageConfig {
                split_ratio: s,
                num_steps: 10,
            },
            expansion: 5,
            mode: InterpMode::Circle,
            seed: 42,
        }
    }

    #[test]
    fn suffixed_step_counts() {
        let c = |s, k| TwoStageConfig { split_ratio: s, num_steps: k }.suffixed_steps();
        assert_eq!(c(0.3, 50), 15);
        assert_eq!(c(0.0, 50), 0);
        assert_eq!(c(1.0, 50), 50);
        assert_eq!(c(0.25, 10), 3);
        assert_eq!(c(0.5, 7), 4);
        assert!(TwoStageConfig { split_ratio: 1.5, num_steps: 5 }.validate().is_err());
    }

    #[test]
    fn stage_log_partitions_steps() {
        let sched = NoiseSchedule::default();
        let z = Array2::ones((2, 3));
        let plain = Array2::zeros((2, 2));
        let suff = Array2::ones((2, 2));
        let cfg = TwoStageConfig { split_ratio: 0.3, num_steps: 50 };
        let (_, log) = two_stage_denoise(&Toy, z, &plain, &suff, &cfg, &sched).unwrap();
        assert_eq!(log.len(), 50);
        assert!(log[..15].iter().all(|r| r.prompt == StepPrompt::Suffixed));
        assert!(log[15..].iter().all(|r| r.prompt == StepPrompt::Plain));
        assert_eq!(log[0].t_from, 1000);
        assert_eq!(log[49].t_to, 0);
    }

    #[test]
    fn zero_split_equals_plain_sampler() {
        let sched = NoiseSchedule::default();
        let z = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let plain = Array2::from_shape_fn((3, 2), |(i, _)| i as f64);
        let suff = Array2::from_elem((3, 2), 9.0);
        let cfg = TwoStageConfig { split_ratio: 0.0, num_steps: 20 };
        let (x, _) = two_stage_denoise(&Toy, z.clone(), &plain, &suff, &cfg, &sched).unwrap();
        let grid = step_grid(1000, 20).unwrap();
        let y = sample(&Toy, z, plain.view(), &grid, &sched).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn full_split_uses_suffix_everywhere() {
        let sched = NoiseSchedule::default();
        let z = Array2::from_elem((1, 4), 0.5);
        let suff = Array2::from_elem((1, 2), 2.0);
        let cfg = TwoStageConfig { split_ratio: 1.0, num_steps: 20 };
        let (x, _) = two_stage_denoise(&Toy, z.clone(), &Array2::zeros((1, 2)), &suff, &cfg, &sched).unwrap();
        let grid = step_grid(1000, 20).unwrap();
        assert_eq!(x, sample(&Toy, z, suff.view(), &grid, &sched).unwrap());
    }

    #[test]
    fn expansion_count_labels_and_determinism() {
        let sched = NoiseSchedule::default();
        let suffixed = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = synthesize_category(&Toy, &pool(4), &[0.1, 0.2], &suffixed, &cfg(0.3), &sched).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|s| s.category_id == 3 && s.image.iter().all(|v| v.is_finite())));
        assert!(a.iter().all(|s| matches!(s.pair, Some((x, y)) if x != y)));
        let b = synthesize_category(&Toy, &pool(4), &[0.1, 0.2], &suffixed, &cfg(0.3), &sched).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(0.3);
        other.seed = 43;
        let c = synthesize_category(&Toy, &pool(4), &[0.1, 0.2], &suffixed, &other, &sched).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn singleton_pool_starts_from_noise() {
        let sched = NoiseSchedule::default();
        let out = synthesize_category(&Toy, &pool(1), &[0.1, 0.2], &[], &cfg(0.3), &sched).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| s.origin == Origin::Noise && s.pair.is_none()));
        assert!(out.iter().all(|s| s.split_ratio == 0.0 && s.suffix_id.is_none()));
    }

    #[test]
    fn reconstruction_mode_reuses_pool_latents() {
        let mut c = cfg(0.0);
        c.mode = InterpMode::Reconstruction;
        let out = synthesize_category(&Toy, &pool(3), &[0.1, 0.2], &[], &c, &NoiseSchedule::default()).unwrap();
        assert!(out.iter().all(|s| matches!(s.pair, Some((a, b)) if a == b)));
    }

    #[test]
    fn static_vocabulary() {
        let tags: Vec<String> = ["on grid background", "on gradient background", "shifted corner", "shifted corner"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = static_suffix_provider(&tags, 8).unwrap();
        assert_eq!(v.len(), 3);
        assert_ne!(v.phrases[0].embedding, v.phrases[1].embedding);
        assert_eq!(static_suffix_provider(&tags[..1], 8).unwrap().len(), 1);
        assert!(static_suffix_provider(&[], 8).is_err());
    }

    struct Stub(Result<String>);

    impl Summarizer for Stub {
        fn summarize(&self, _: &[String]) -> Result<String> {
            match &self.0 {
                Ok(s) => Ok(s.clone()),
                Err(e) => Err(Error::Service(e.to_string())),
            }
        }
    }

    #[test]
    fn external_vocabulary_from_stub() {
        let caps = vec!["a photo of a glyph on grid background".to_string()];
        let ok = Stub(Ok(r#"{"phrases": ["a photo of a glyph at dusk", "a photo of a glyph in fog"]}"#.into()));
        let v = external_suffix_provider(&ok, &caps, "glyph", 8, None).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.provenance, Provenance::External);
        assert_eq!(v.phrases[1].text, "in fog");

        let bad = Stub(Ok(r#"{"phrases": ["a drawing of a cat"]}"#.into()));
        assert!(matches!(
            external_suffix_provider(&bad, &caps, "glyph", 8, None),
            Err(Error::Parse(_))
        ));
        let down = Stub(Err(Error::Service("refused".into())));
        let tags = vec!["on grid background".to_string()];
        let v = external_suffix_provider(&down, &caps, "glyph", 8, Some(&tags)).unwrap();
        assert_eq!(v.provenance, Provenance::Static);
        assert!(external_suffix_provider(&down, &caps, "glyph", 8, None).is_err());
    }

    #[test]
    fn metadata_rows() {
        let sched = NoiseSchedule::default();
        let out = synthesize_category(&Toy, &pool(2), &[0.1, 0.2], &[vec![0.0, 1.0]], &cfg(0.5), &sched).unwrap();
        let csv = metadata_csv(&out);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], METADATA_HEADER);
        assert_eq!(lines[1].split(',').count(), 10);
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_set(dir.path(), &out, 3).unwrap();
        assert!(dir.path().join("sample_00009.pgm").exists());
    }
}
