//! Procedural few-shot glyph datasets.
//!
//! Each class is a glyph template; each image composites one glyph onto a
//! context-dependent background with seeded jitter. Context tags double as
//! ground-truth captions for the suffix pipeline.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const RESOLUTIONS: [usize; 3] = [16, 24, 32];

pub const TEMPLATE_NAMES: [&str; 10] = [
    "disc", "cross", "triangle", "hbars", "ring", "frame", "saltire", "vbars", "diamond", "corner",
];

pub const CONTEXT_TAGS: [&str; 4] = [
    "on flat background",
    "on gradient background",
    "on grid background",
    "shifted corner",
];

/// Metaclass noun used in every prompt for these datasets.
pub const METACLASS: &str = "glyph";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub shots: usize,
    /// Number of context styles in use (prefix of [`CONTEXT_TAGS`]).
    pub contexts: usize,
    pub resolution: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Per-class shot counts overriding `shots` (class ids are 1-based).
    pub shot_overrides: BTreeMap<usize, usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            shots: 5,
            contexts: 4,
            resolution: 16,
            test_per_class: 60,
            seed: 0,
            shot_overrides: BTreeMap::new(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("data.classes", "need at least 2 classes"));
        }
        if self.classes > TEMPLATE_NAMES.len() {
            return Err(Error::param(
                "data.classes",
                format!("only {} glyph templates exist", TEMPLATE_NAMES.len()),
            ));
        }
        if self.shots == 0 {
            return Err(Error::param("data.shots", "must be at least 1"));
        }
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::param(
                "data.resolution",
                format!("must be one of {RESOLUTIONS:?}"),
            ));
        }
        if !(2..=CONTEXT_TAGS.len()).contains(&self.contexts) {
            return Err(Error::param(
                "data.contexts",
                format!("must be within 2..={}", CONTEXT_TAGS.len()),
            ));
        }
        if self.test_per_class < 50 {
            return Err(Error::param("data.test_per_class", "must be at least 50"));
        }
        for (&class, &shots) in &self.shot_overrides {
            if class == 0 || class > self.classes {
                return Err(Error::param("data.shot_overrides", format!("unknown class {class}")));
            }
            if shots == 0 {
                return Err(Error::param("data.shot_overrides", "every class needs at least one image"));
            }
        }
        Ok(())
    }

    pub fn shots_for(&self, class: usize) -> usize {
        self.shot_overrides.get(&class).copied().unwrap_or(self.shots)
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn context_names(&self) -> Vec<String> {
        CONTEXT_TAGS[..self.contexts].iter().map(|s| s.to_string()).collect()
    }
}

/// Images with 1-based labels and context indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub contexts: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Vec<f64>, label: usize, context: usize) {
        self.images.push(image);
        self.labels.push(label);
        self.contexts.push(context);
    }

    /// Indices of the items carrying `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralDataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

impl ProceduralDataset {
    pub fn context_names(&self) -> Vec<String> {
        self.spec.context_names()
    }

    /// Context tags of the training images, deduplicated in first-seen order.
    pub fn train_tags(&self) -> Vec<String> {
        let names = self.context_names();
        let mut out: Vec<String> = Vec::new();
        for &c in &self.train.contexts {
            if !out.contains(&names[c]) {
                out.push(names[c].clone());
            }
        }
        out
    }

    /// Caption analog of each training image: `a photo of a glyph <context>`.
    pub fn train_captions(&self) -> Vec<String> {
        let names = self.context_names();
        self.train
            .contexts
            .iter()
            .map(|&c| format!("a photo of a {METACLASS} {}", names[c]))
            .collect()
    }
}

/// Generates the dataset described by `spec`. A pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<ProceduralDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Split::default();
    for class in 1..=spec.classes {
        for _ in 0..spec.shots_for(class) {
            let ctx = rng.random_range(0..spec.contexts);
            train.push(render(class - 1, ctx, spec.resolution, &mut rng), class, ctx);
        }
    }
    let mut test = Split::default();
    for class in 1..=spec.classes {
        for i in 0..spec.test_per_class {
            let ctx = i % spec.contexts;
            test.push(render(class - 1, ctx, spec.resolution, &mut rng), class, ctx);
        }
    }
    Ok(ProceduralDataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Abundant images of the first `classes` templates across `contexts` styles,
/// `per_class` each, with contexts cycling.
pub fn generate_abundant(
    classes: usize,
    contexts: usize,
    resolution: usize,
    per_class: usize,
    seed: u64,
) -> Result<Split> {
    let spec = DatasetSpec {
        classes,
        contexts,
        resolution,
        seed,
        ..DatasetSpec::default()
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split::default();
    for i in 0..per_class {
        for class in 1..=classes {
            let ctx = (i + class) % contexts;
            out.push(render(class - 1, ctx, resolution, &mut rng), class, ctx);
        }
    }
    Ok(out)
}

/// Glyph coverage in `[0, 1]` at glyph-frame coordinates `(u, v)`, both nominally in `[-1, 1]`.
fn coverage(template: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    // soft edge: distance (negative inside) -> coverage
    let edge = |d: f64| (0.5 - d / 0.12).clamp(0.0, 1.0);
    let boxd = |du: f64, dv: f64| du.max(dv);
    match template {
        0 => edge(r - 0.62),
        1 => {
            let bar = |a: f64, b: f64| boxd(a.abs() - 0.2, b.abs() - 0.78);
            edge(bar(u, v).min(bar(v, u)))
        }
        2 => {
            // upward triangle with apex at v = -0.75
            let base = v - 0.65;
            let left = (-0.87 * u - 0.5 * v) - 0.37;
            let right = (0.87 * u - 0.5 * v) - 0.37;
            edge(base.max(left).max(right))
        }
        3 => {
            let stripe = ((v + 0.75) / 0.5).rem_euclid(1.0);
            let inside = boxd(u.abs() - 0.75, v.abs() - 0.75);
            edge(inside.max((stripe - 0.55).abs() - 0.25))
        }
        4 => edge((r - 0.55).abs() - 0.17),
        5 => {
            let m = u.abs().max(v.abs());
            edge((m - 0.6).abs() - 0.15)
        }
        6 => {
            let diag = ((u - v).abs() / 2f64.sqrt()).min((u + v).abs() / 2f64.sqrt()) - 0.17;
            edge(diag.max(r - 0.85))
        }
        7 => {
            let stripe = ((u + 0.75) / 0.5).rem_euclid(1.0);
            let inside = boxd(u.abs() - 0.75, v.abs() - 0.75);
            edge(inside.max((stripe - 0.55).abs() - 0.25))
        }
        8 => edge((u.abs() + v.abs()) / 2f64.sqrt() - 0.52),
        9 => {
            let vertical = boxd((u + 0.5).abs() - 0.2, v.abs() - 0.75);
            let horizontal = boxd(u.abs() - 0.7, (v - 0.55).abs() - 0.2);
            edge(vertical.min(horizontal))
        }
        _ => unreachable!("template index checked by DatasetSpec::validate"),
    }
}

fn render(template: usize, context: usize, res: usize, rng: &mut impl Rng) -> Vec<f64> {
    let px = 2.0 / res as f64;
    let scale_jitter = rng.random_range(0.9..1.1);
    let rotation = rng.random_range(-0.15..0.15);
    let fg = rng.random_range(0.55..0.9);
    let mut cx = rng.random_range(-1.0..=1.0) * px;
    let mut cy = rng.random_range(-1.0..=1.0) * px;
    let mut glyph_half = 0.62 * scale_jitter;
    let base_level = rng.random_range(-0.8..-0.6);
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let grid_offset = rng.random_range(0..4usize);
    if context == 3 {
        let corner = rng.random_range(0..4usize);
        glyph_half *= 0.62;
        let sx = if corner % 2 == 0 { -1.0 } else { 1.0 };
        let sy = if corner / 2 == 0 { -1.0 } else { 1.0 };
        cx += sx * 0.5;
        cy += sy * 0.5;
    }
    let (sin_r, cos_r) = f64::sin_cos(rotation);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let mut cov = 0.0;
            // 2x2 supersampling
            for sub in 0..4 {
                let x = -1.0 + (col as f64 + 0.25 + 0.5 * (sub % 2) as f64) * px;
                let y = -1.0 + (row as f64 + 0.25 + 0.5 * (sub / 2) as f64) * px;
                let (dx, dy) = ((x - cx) / glyph_half, (y - cy) / glyph_half);
                let u = cos_r * dx + sin_r * dy;
                let v = -sin_r * dx + cos_r * dy;
                cov += coverage(template, u, v) / 4.0;
            }
            let x = -1.0 + (col as f64 + 0.5) * px;
            let y = -1.0 + (row as f64 + 0.5) * px;
            let bg = match context {
                1 => {
                    let proj = x * grad_angle.cos() + y * grad_angle.sin();
                    -0.6 + 0.4 * proj / 2f64.sqrt()
                }
                2 => {
                    if (row + grid_offset) % 4 == 0 || (col + grid_offset) % 4 == 0 {
                        -0.15
                    } else {
                        -0.85
                    }
                }
                _ => base_level,
            };
            let value = bg * (1.0 - cov) + fg * cov + noise.sample(rng);
            out.push(value.clamp(-1.0, 1.0));
        }
    }
    out
}
