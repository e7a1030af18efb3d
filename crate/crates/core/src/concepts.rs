//! Category concepts: learnable token vectors per category, prompt assembly
//! by mean pooling, and joint token/adapter learning on the few-shot set.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnet::{
    batch_loss_and_grads, DenoiserParams, Gradients, NoisedBatch, OptimizerState, RunningLoss, TrainConfig,
    TrainItem, TrainMode, TrainReport,
};
use crate::schedule::NoiseSchedule;

/// Fixed pseudo text embedding of a phrase: a standard-normal vector seeded by
/// the phrase's SHA-256. Stands in for a frozen text encoder.
pub fn phrase_embedding(phrase: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(phrase.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phrase {
    pub text: String,
    pub embedding: Vec<f64>,
}

impl Phrase {
    pub fn new(text: impl Into<String>, dim: usize) -> Self {
        let text = text.into();
        let embedding = phrase_embedding(&text, dim);
        Self { text, embedding }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryConcept {
    /// 1-based.
    pub category_id: usize,
    pub tokens: Vec<Vec<f64>>,
}

impl CategoryConcept {
    pub fn checkpoint_name(&self, token: usize) -> String {
        format!("concept/{}/{}", self.category_id, token)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PromptSpec<'a> {
    pub concept: Option<&'a CategoryConcept>,
    pub metaclass_id: usize,
    pub suffix_id: Option<usize>,
}

impl<'a> PromptSpec<'a> {
    pub fn plain(concept: &'a CategoryConcept, metaclass_id: usize) -> Self {
        Self {
            concept: Some(concept),
            metaclass_id,
            suffix_id: None,
        }
    }

    pub fn with_suffix(self, suffix_id: usize) -> Self {
        Self {
            suffix_id: Some(suffix_id),
            ..self
        }
    }
}

/// Encoded prompt fed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding(pub Vec<f64>);

impl ConditionEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Short hex digest of the vector bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Mean of the present part vectors: concept tokens, metaclass, optional suffix.
pub fn assemble_condition(
    spec: &PromptSpec<'_>,
    metaclasses: &[Phrase],
    suffixes: &[Phrase],
) -> Result<ConditionEmbedding> {
    let meta = metaclasses.get(spec.metaclass_id).ok_or(Error::UnknownId {
        kind: "metaclass",
        id: spec.metaclass_id,
    })?;
    let mut parts: Vec<&[f64]> = Vec::new();
    if let Some(c) = spec.concept {
        parts.extend(c.tokens.iter().map(Vec::as_slice));
    }
    parts.push(&meta.embedding);
    if let Some(id) = spec.suffix_id {
        let s = suffixes.get(id).ok_or(Error::UnknownId { kind: "suffix", id })?;
        parts.push(&s.embedding);
    }
    let dim = meta.embedding.len();
    let mut out = vec![0.0; dim];
    for p in &parts {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += v;
        }
    }
    let n = parts.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("condition embedding".into()));
    }
    Ok(ConditionEmbedding(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptConfig {
    pub train: TrainConfig,
    pub tokens_per_category: usize,
    /// Std-dev of the Gaussian jitter added to the metaclass copy at init.
    pub init_sigma: f64,
}

impl ConceptConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate("concepts")?;
        if self.tokens_per_category == 0 {
            return Err(Error::param("concepts.tokens", "need at least one token"));
        }
        if !(self.init_sigma >= 0.0) {
            return Err(Error::param("concepts.init_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Tokens initialized as the metaclass embedding plus seeded N(0, sigma²) jitter.
pub fn init_concepts(categories: usize, metaclass: &Phrase, cfg: &ConceptConfig) -> Vec<CategoryConcept> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xc0_ce97);
    let jitter = Normal::new(0.0, cfg.init_sigma).expect("validated sigma");
    (1..=categories)
        .map(|category_id| CategoryConcept {
            category_id,
            tokens: (0..cfg.tokens_per_category)
                .map(|_| {
                    metaclass
                        .embedding
                        .iter()
                        .map(|v| v + jitter.sample(&mut rng))
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Per-category token gradients (`tokens × cond_dim`) produced by one batch.
pub fn token_gradients(grads: &Gradients, categories: &[usize], concepts: &[CategoryConcept]) -> Vec<Array2<f64>> {
    let mut out: Vec<Array2<f64>> = concepts
        .iter()
        .map(|c| Array2::zeros((c.tokens.len(), grads.cond.ncols())))
        .collect();
    for (row, &cat) in categories.iter().enumerate() {
        let concept = &concepts[cat - 1];
        // c = (sum tokens + meta) / (n + 1)
        let share = 1.0 / (concept.tokens.len() + 1) as f64;
        let g = grads.cond.row(row);
        for mut token_row in out[cat - 1].rows_mut() {
            token_row.scaled_add(share, &g);
        }
    }
    out
}

/// Training images for concept learning, with 1-based categories.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub image: &'a [f64],
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct LearnedConcepts {
    pub concepts: Vec<CategoryConcept>,
    pub params: DenoiserParams,
    pub report: TrainReport,
}

/// Jointly trains per-category tokens and the shared adapters of `params` on
/// `images` with plain prompts. Base tensors are never written.
pub fn learn_concepts(
    params: &DenoiserParams,
    images: &[LabeledImage<'_>],
    categories: usize,
    metaclass_id: usize,
    metaclasses: &[Phrase],
    sched: &NoiseSchedule,
    cfg: &ConceptConfig,
) -> Result<LearnedConcepts> {
    cfg.validate()?;
    let metaclass = metaclasses.get(metaclass_id).ok_or(Error::UnknownId {
        kind: "metaclass",
        id: metaclass_id,
    })?;
    for cat in 1..=categories {
        if !images.iter().any(|im| im.category == cat) {
            return Err(Error::Empty(format!("category {cat} has no training images")));
        }
    }
    if let Some(im) = images.iter().find(|im| im.category == 0 || im.category > categories) {
        return Err(Error::param("concepts", format!("image label {} outside 1..={categories}", im.category)));
    }
    let mut concepts = init_concepts(categories, metaclass, cfg);
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = OptimizerState::new(cfg.train.optimizer, cfg.train.learning_rate);
    let mut running = RunningLoss::default();
    let mut curve = Vec::new();
    let every = (cfg.train.steps / 50).max(1);

    for step in 0..cfg.train.steps {
        let picks: Vec<usize> = (0..cfg.train.batch_size)
            .map(|_| rng.random_range(0..images.len()))
            .collect();
        let conds: Vec<ConditionEmbedding> = picks
            .iter()
            .map(|&i| {
                let c = &concepts[images[i].category - 1];
                assemble_condition(&PromptSpec::plain(c, metaclass_id), metaclasses, &[])
            })
            .collect::<Result<_>>()?;
        let items: Vec<TrainItem<'_>> = picks
            .iter()
            .zip(&conds)
            .map(|(&i, c)| TrainItem {
                x0: images[i].image,
                cond: c.as_slice(),
            })
            .collect();
        let batch = NoisedBatch::sample(&items, sched, &mut rng)?;
        let (loss, grads) = match batch_loss_and_grads(&params, &batch, TrainMode::Adapters) {
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { step, loss }),
            other => other?,
        };
        running.push(loss);
        opt.tick();
        for (name, view) in params.named_tensors_mut() {
            if let Some(g) = grads.get(&name) {
                opt.apply(&name, view, g);
            }
        }
        let cats: Vec<usize> = picks.iter().map(|&i| images[i].category).collect();
        let token_grads = token_gradients(&grads, &cats, &concepts);
        for (concept, g) in concepts.iter_mut().zip(token_grads) {
            if !cats.contains(&concept.category_id) {
                continue;
            }
            for (j, token) in concept.tokens.iter_mut().enumerate() {
                let name = format!("concept/{}/{}", concept.category_id, j);
                let view = ndarray::ArrayViewMut1::from(token.as_mut_slice()).into_dyn();
                opt.apply(&name, view, &g.row(j).to_owned().into_dyn());
            }
        }
        if (step + 1) % every == 0 {
            curve.push((step + 1, running.current()));
        }
    }
    Ok(LearnedConcepts {
        concepts,
        params,
        report: TrainReport {
            initial_loss: running.initial(),
            final_loss: running.current(),
            curve,
        },
    })
}

/// Mean ε-prediction loss over `images` with a fixed seed, for before/after comparisons.
pub fn evaluate_concept_loss(
    params: &DenoiserParams,
    images: &[LabeledImage<'_>],
    concepts: &[CategoryConcept],
    metaclass_id: usize,
    metaclasses: &[Phrase],
    sched: &NoiseSchedule,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conds: Vec<ConditionEmbedding> = images
        .iter()
        .map(|im| assemble_condition(&PromptSpec::plain(&concepts[im.category - 1], metaclass_id), metaclasses, &[]))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for _ in 0..repeats {
        let items: Vec<TrainItem<'_>> = images
            .iter()
            .zip(&conds)
            .map(|(im, c)| TrainItem {
                x0: im.image,
                cond: c.as_slice(),
            })
            .collect();
        let batch = NoisedBatch::sample(&items, sched, &mut rng)?;
        total += crate::nnet::batch_loss(params, &batch)?;
    }
    Ok(total / repeats as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vocab() -> (Vec<Phrase>, Vec<Phrase>) {
        (
            vec![Phrase::new("glyph", 8)],
            vec![Phrase::new("on grid background", 8), Phrase::new("shifted corner", 8)],
        )
    }

    fn concept(n: usize) -> CategoryConcept {
        CategoryConcept {
            category_id: 1,
            tokens: (0..n).map(|j| (0..8).map(|k| (j * 8 + k) as f64 * 0.1 - 1.0).collect()).collect(),
        }
    }

    #[test]
    fn metaclass_only_is_the_metaclass_embedding() {
        let (meta, suf) = vocab();
        let spec = PromptSpec {
            concept: None,
            metaclass_id: 0,
            suffix_id: None,
        };
        let c = assemble_condition(&spec, &meta, &suf).unwrap();
        assert_eq!(c.0, meta[0].embedding);
        assert_eq!(c, assemble_condition(&spec, &meta, &suf).unwrap());
    }

    #[test]
    fn suffix_contributes_one_mean_term() {
        let (meta, suf) = vocab();
        let k = concept(2);
        let plain = assemble_condition(&PromptSpec::plain(&k, 0), &meta, &suf).unwrap();
        let suffixed = assemble_condition(&PromptSpec::plain(&k, 0).with_suffix(1), &meta, &suf).unwrap();
        // plain = S/3 and suffixed = (S + s)/4
        for i in 0..8 {
            let sum = plain.0[i] * 3.0;
            assert_abs_diff_eq!(suffixed.0[i], (sum + suf[1].embedding[i]) / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn token_order_does_not_matter() {
        let (meta, suf) = vocab();
        let k = concept(3);
        let mut r = k.clone();
        r.tokens.reverse();
        let a = assemble_condition(&PromptSpec::plain(&k, 0), &meta, &suf).unwrap();
        let b = assemble_condition(&PromptSpec::plain(&r, 0), &meta, &suf).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let (meta, suf) = vocab();
        let k = concept(1);
        let bad_meta = PromptSpec {
            concept: Some(&k),
            metaclass_id: 3,
            suffix_id: None,
        };
        assert!(matches!(
            assemble_condition(&bad_meta, &meta, &suf),
            Err(Error::UnknownId { kind: "metaclass", .. })
        ));
        let bad_suffix = PromptSpec::plain(&k, 0).with_suffix(9);
        assert!(matches!(
            assemble_condition(&bad_suffix, &meta, &suf),
            Err(Error::UnknownId { kind: "suffix", .. })
        ));
    }

    #[test]
    fn phrase_embeddings_are_stable_and_distinct() {
        assert_eq!(phrase_embedding("a", 16), phrase_embedding("a", 16));
        assert_ne!(phrase_embedding("a", 16), phrase_embedding("b", 16));
    }
}
