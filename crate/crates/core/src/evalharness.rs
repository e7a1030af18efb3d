//! Quality metrics for synthetic sets and the downstream few-shot protocol.
//!
//! Diversity is the mean pairwise pixel distance within a category, normalized
//! by the square root of the pixel count. Faithfulness is the probability an
//! oracle classifier assigns to the intended label. Downstream accuracy comes
//! from a softmax classifier trained on the original set with random
//! same-category replacement by synthetic images.

use std::fmt::Write as _;

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::datio::Split;
use crate::error::{Error, Result};
use crate::nnet::{Optimizer, OptimizerState};
use crate::synthesis::{InterpMode, SyntheticSample};

/// An image with a 1-based label.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub image: &'a [f64],
    pub label: usize,
}

pub fn labeled_split(split: &Split) -> Vec<Labeled<'_>> {
    split
        .images
        .iter()
        .zip(&split.labels)
        .map(|(image, &label)| Labeled { image, label })
        .collect()
}

pub fn labeled_samples(samples: &[SyntheticSample]) -> Vec<Labeled<'_>> {
    samples
        .iter()
        .map(|s| Labeled {
            image: &s.image,
            label: s.category_id,
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over categories of the mean normalized pairwise distance. Categories
/// with fewer than two images are skipped with a warning.
pub fn diversity(set: &[Labeled<'_>]) -> Result<f64> {
    let mut labels: Vec<usize> = set.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut per_category = Vec::new();
    for label in labels {
        let members: Vec<&[f64]> = set.iter().filter(|s| s.label == label).map(|s| s.image).collect();
        if members.len() < 2 {
            warn!("category {label} has fewer than two images; excluded from diversity");
            continue;
        }
        let norm = (members[0].len() as f64).sqrt();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                total += distance(members[i], members[j]);
                pairs += 1;
            }
        }
        per_category.push(total / pairs as f64 / norm);
    }
    if per_category.is_empty() {
        return Err(Error::Empty("no category has two images for diversity".into()));
    }
    Ok(per_category.iter().sum::<f64>() / per_category.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// Width of the ReLU hidden layer; 0 gives multinomial logistic regression.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Linear downstream classifier.
    pub fn downstream(seed: u64) -> Self {
        Self {
            hidden: 0,
            epochs: 150,
            batch_size: 8,
            learning_rate: 0.05,
            lr_decay: 0.1,
            weight_decay: 1e-3,
            optimizer: Optimizer::Sgd,
            seed,
        }
    }

    /// One-hidden-layer oracle.
    pub fn oracle(seed: u64) -> Self {
        Self {
            hidden: 256,
            epochs: 120,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.0,
            weight_decay: 1e-4,
            optimizer: Optimizer::adam(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("classifier.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("classifier.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub classes: usize,
    hidden: Option<(Array2<f64>, Array1<f64>)>,
    w: Array2<f64>,
    b: Array1<f64>,
    /// Held-out accuracy recorded by the trainer, if any.
    pub validated_accuracy: Option<f64>,
}

fn stack(images: &[&[f64]]) -> Array2<f64> {
    let d = images.first().map_or(0, |i| i.len());
    let mut x = Array2::zeros((images.len(), d));
    for (i, im) in images.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::aview1(im));
    }
    x
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    logits
}

impl Classifier {
    fn init(dim: usize, classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let r = 1.0 / (cols as f64).sqrt();
            let u = Uniform::new_inclusive(-r, r).expect("finite bound");
            Array2::from_shape_fn((rows, cols), |_| u.sample(rng))
        };
        let (hidden_layer, top_in) = if hidden > 0 {
            (Some((uniform(hidden, dim), Array1::zeros(hidden))), hidden)
        } else {
            (None, dim)
        };
        Self {
            classes,
            hidden: hidden_layer,
            w: if hidden > 0 { uniform(classes, top_in) } else { Array2::zeros((classes, dim)) },
            b: Array1::zeros(classes),
            validated_accuracy: None,
        }
    }

    fn features(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.hidden {
            Some((w1, b1)) => (x.dot(&w1.t()) + b1).mapv(|v| v.max(0.0)),
            None => x.to_owned(),
        }
    }

    /// Class probabilities, one row per image; column `k` is label `k + 1`.
    pub fn predict_proba(&self, images: &[&[f64]]) -> Array2<f64> {
        let x = stack(images);
        let h = self.features(x.view());
        softmax_rows(h.dot(&self.w.t()) + &self.b)
    }

    pub fn accuracy(&self, set: &[Labeled<'_>]) -> f64 {
        if set.is_empty() {
            return f64::NAN;
        }
        let images: Vec<&[f64]> = set.iter().map(|s| s.image).collect();
        let p = self.predict_proba(&images);
        let correct = p
            .rows()
            .into_iter()
            .zip(set)
            .filter(|(row, s)| {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(k, _)| k);
                best + 1 == s.label
            })
            .count();
        correct as f64 / set.len() as f64
    }

    fn step(&mut self, images: &[&[f64]], labels: &[usize], decay: f64, opt: &mut OptimizerState) {
        let x = stack(images);
        let h = self.features(x.view());
        let mut d = softmax_rows(h.dot(&self.w.t()) + &self.b);
        for (mut row, &l) in d.rows_mut().into_iter().zip(labels) {
            row[l - 1] -= 1.0;
        }
        d /= images.len() as f64;
        let gw = d.t().dot(&h) + &(&self.w * decay);
        let gb = d.sum_axis(Axis(0));
        opt.tick();
        if let Some((w1, b1)) = &mut self.hidden {
            let mut dh = d.dot(&self.w);
            ndarray::Zip::from(&mut dh).and(&h).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let gw1 = dh.t().dot(&x) + &(&*w1 * decay);
            opt.apply("w1", w1.view_mut().into_dyn(), &gw1.into_dyn());
            opt.apply("b1", b1.view_mut().into_dyn(), &dh.sum_axis(Axis(0)).into_dyn());
        }
        opt.apply("w", self.w.view_mut().into_dyn(), &gw.into_dyn());
        opt.apply("b", self.b.view_mut().into_dyn(), &gb.into_dyn());
    }
}

/// Mini-batch training with learning rate `lr / (1 + lr_decay * epoch)`. `draw(i, rng)` returns
/// the training item used in place of `train[i]`; it is called once per
/// visited index with a generator separate from the shuffling stream.
fn fit_with<'a>(
    train: &[Labeled<'a>],
    classes: usize,
    cfg: &ClassifierConfig,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> Labeled<'a>,
) -> Result<Classifier> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::Empty("classifier training set".into()))?;
    if let Some(bad) = train.iter().find(|s| s.label == 0 || s.label > classes) {
        return Err(Error::param("classifier", format!("label {} outside 1..={classes}", bad.label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut swap_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a4b);
    let mut model = Classifier::init(first.image.len(), classes, cfg.hidden, &mut rng);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        opt.set_learning_rate(cfg.learning_rate / (1.0 + cfg.lr_decay * epoch as f64));
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Labeled<'a>> = chunk.iter().map(|&i| draw(i, &mut swap_rng)).collect();
            let images: Vec<&[f64]> = items.iter().map(|s| s.image).collect();
            let labels: Vec<usize> = items.iter().map(|s| s.label).collect();
            model.step(&images, &labels, cfg.weight_decay, &mut opt);
        }
    }
    if model.w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier weights".into()));
    }
    Ok(model)
}

pub fn fit(train: &[Labeled<'_>], classes: usize, cfg: &ClassifierConfig) -> Result<Classifier> {
    fit_with(train, classes, cfg, |i, _| train[i])
}

/// Required held-out accuracy of the oracle.
pub const ORACLE_MIN_ACCURACY: f64 = 0.95;

/// Trains the oracle on `train` and certifies it on `held_out`.
pub fn train_oracle(train: &[Labeled<'_>], held_out: &[Labeled<'_>], classes: usize, cfg: &ClassifierConfig) -> Result<Classifier> {
    let mut model = fit(train, classes, cfg)?;
    let acc = model.accuracy(held_out);
    info!("oracle held-out accuracy {acc:.4}");
    model.validated_accuracy = Some(acc);
    Ok(model)
}

/// Mean oracle probability of each sample's intended label.
pub fn faithfulness(set: &[Labeled<'_>], oracle: &Classifier) -> Result<f64> {
    match oracle.validated_accuracy {
        Some(a) if a >= ORACLE_MIN_ACCURACY => {}
        other => {
            return Err(Error::param(
                "oracle",
                format!("needs held-out accuracy >= {ORACLE_MIN_ACCURACY}, has {other:?}"),
            ))
        }
    }
    if set.is_empty() {
        return Err(Error::Empty("faithfulness set".into()));
    }
    if let Some(bad) = set.iter().find(|s| s.label == 0 || s.label > oracle.classes) {
        return Err(Error::param("faithfulness", format!("label {} unknown to the oracle", bad.label)));
    }
    let images: Vec<&[f64]> = set.iter().map(|s| s.image).collect();
    let p = oracle.predict_proba(&images);
    Ok(set.iter().enumerate().map(|(i, s)| p[[i, s.label - 1]]).sum::<f64>() / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub replacement: f64,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierConfig,
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replacement) {
            return Err(Error::param("evaluate.replacement", format!("{} outside [0, 1]", self.replacement)));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("evaluate.seeds", "need at least one seed"));
        }
        self.classifier.validate()
    }
}

/// Mean test accuracy over seeds of a classifier trained on `original`, where
/// each visited item is swapped for a random same-category synthetic item with
/// probability `replacement`.
pub fn train_downstream<'a>(
    original: &[Labeled<'a>],
    synthetic: &[Labeled<'a>],
    test: &[Labeled<'_>],
    classes: usize,
    cfg: &DownstreamConfig,
) -> Result<f64> {
    cfg.validate()?;
    if let Some(bad) = synthetic.iter().find(|s| s.label == 0 || s.label > classes) {
        return Err(Error::param("synthetic", format!("label {} outside 1..={classes}", bad.label)));
    }
    let by_class: Vec<Vec<usize>> = (1..=classes)
        .map(|c| (0..synthetic.len()).filter(|&i| synthetic[i].label == c).collect())
        .collect();
    if cfg.replacement > 0.0 {
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() && original.iter().any(|o| o.label == c + 1) {
                warn!("no synthetic images for category {}; its originals are never replaced", c + 1);
            }
        }
    }
    let p = cfg.replacement;
    let mut accs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut ccfg = cfg.classifier.clone();
        ccfg.seed = seed;
        let model = fit_with(original, classes, &ccfg, |i, rng| {
            let item = original[i];
            if p > 0.0 && rng.random::<f64>() < p {
                let pool = &by_class[item.label - 1];
                if !pool.is_empty() {
                    return synthetic[pool[rng.random_range(0..pool.len())]];
                }
            }
            item
        })?;
        accs.push(model.accuracy(test));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Component switches of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub concept_learning: bool,
    pub linear_interp: bool,
    pub spherical_interp: bool,
    pub spherical_extrap: bool,
    pub two_stage: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        concept_learning: true,
        linear_interp: false,
        spherical_interp: true,
        spherical_extrap: true,
        two_stage: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.linear_interp && (self.spherical_interp || self.spherical_extrap) {
            return Err(Error::param("ablation", "linear and spherical interpolation are exclusive"));
        }
        Ok(())
    }

    pub fn interp_mode(&self) -> InterpMode {
        match (self.linear_interp, self.spherical_interp, self.spherical_extrap) {
            (true, _, _) => InterpMode::Linear,
            (false, true, true) => InterpMode::Circle,
            (false, true, false) => InterpMode::Slerp,
            (false, false, true) => InterpMode::Extrapolate,
            (false, false, false) => InterpMode::Reconstruction,
        }
    }

    /// Short label such as `CL+SI+SE+TD`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.concept_learning, "CL"),
            (self.linear_interp, "LI"),
            (self.spherical_interp, "SI"),
            (self.spherical_extrap, "SE"),
            (self.two_stage, "TD"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Produces the synthetic set of a pipeline variant.
pub trait VariantSource {
    fn synthesize(&self, toggles: &Toggles, seed: u64) -> Result<Vec<SyntheticSample>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub diversity: f64,
    pub accuracy: f64,
    /// Per-seed diversities, in seed order.
    pub diversity_by_seed: Vec<f64>,
}

/// Runs each variant for every seed; diversity and accuracy are seed means.
/// Downstream training for seed `s` uses classifier seed `s` as well.
pub fn run_ablation(
    source: &impl VariantSource,
    rows: &[Toggles],
    seeds: &[u64],
    original: &[Labeled<'_>],
    test: &[Labeled<'_>],
    classes: usize,
    downstream: &DownstreamConfig,
) -> Result<Vec<AblationRow>> {
    for t in rows {
        t.validate()?;
    }
    if seeds.is_empty() {
        return Err(Error::param("ablation.seeds", "need at least one seed"));
    }
    let mut out = Vec::with_capacity(rows.len());
    for toggles in rows {
        let mut divs = Vec::new();
        let mut accs = Vec::new();
        for &seed in seeds {
            let samples = source.synthesize(toggles, seed)?;
            let set = labeled_samples(&samples);
            divs.push(diversity(&set)?);
            let mut cfg = downstream.clone();
            cfg.seeds = vec![seed];
            accs.push(train_downstream(original, &set, test, classes, &cfg)?);
        }
        info!("ablation {}: diversity {:?}", toggles.label(), divs);
        out.push(AblationRow {
            toggles: *toggles,
            diversity: divs.iter().sum::<f64>() / divs.len() as f64,
            accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            diversity_by_seed: divs,
        });
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,diversity,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.toggles.label(), r.diversity, r.accuracy);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub diversity: f64,
    pub faithfulness: f64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// Resolved configuration, echoed verbatim.
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("diversity", self.diversity),
            ("faithfulness", self.faithfulness),
            ("accuracy", self.accuracy),
            ("baseline_accuracy", self.baseline_accuracy),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        for (name, v) in [
            ("faithfulness", self.faithfulness),
            ("accuracy", self.accuracy),
            ("baseline_accuracy", self.baseline_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in [
            ("diversity", self.diversity),
            ("faithfulness", self.faithfulness),
            ("accuracy", self.accuracy),
            ("baseline_accuracy", self.baseline_accuracy),
        ] {
            let _ = writeln!(out, "{k},{v:.6}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k},{v}");
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "diversity     {:.4}\nfaithfulness  {:.4}\naccuracy      {:.4} (original only {:.4}, gain {:+.2} pp)\n",
            self.diversity,
            self.faithfulness,
            self.accuracy,
            self.baseline_accuracy,
            100.0 * (self.accuracy - self.baseline_accuracy)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub split_ratio: f64,
    pub diversity: f64,
    pub faithfulness: f64,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("split_ratio,diversity,faithfulness\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.split_ratio, p.diversity, p.faithfulness);
    }
    out
}

/// Diversity (left axis) and faithfulness (right axis) against the split ratio.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 56.0;
    let range = |f: &dyn Fn(&SweepPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.1 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let px = |s: f64| M + s * (W - 2.0 * M);
    let py = |v: f64, (lo, hi): (f64, f64)| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let div_range = range(&|p: &SweepPoint| p.diversity);
    let faith_range = range(&|p: &SweepPoint| p.faithfulness);
    let path = |f: &dyn Fn(&SweepPoint) -> f64, r: (f64, f64)| {
        points
            .iter()
            .map(|p| format!("{:.1},{:.1}", px(p.split_ratio), py(f(p), r)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (M, W - M, H - M, M);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = px(s);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{s}</text>"#, y0 + 16.0);
    }
    for (r, x, anchor) in [(div_range, x0 - 6.0, "end"), (faith_range, x1 + 6.0, "start")] {
        for k in 0..=4 {
            let v = r.0 + (r.1 - r.0) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{x:.1}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#,
                py(v, r) + 4.0
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">split ratio s</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{x0}" y="{:.1}" fill="#1f77b4">diversity</text>"##,
        M - 20.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{x1}" y="{:.1}" fill="#d62728" text-anchor="end">faithfulness</text>"##,
        M - 20.0
    );
    for (f, r, color) in [
        (&(|p: &SweepPoint| p.diversity) as &dyn Fn(&SweepPoint) -> f64, div_range, "#1f77b4"),
        (&|p: &SweepPoint| p.faithfulness, faith_range, "#d62728"),
    ] {
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path(f, r)
        );
        for p in points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(p.split_ratio),
                py(f(p), r)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
