//! Stage runners over an artifact directory.
//!
//! Layout under the run directory, one subdirectory per stage:
//!
//! ```text
//! data/       dataset.tensors, dataset.spec.txt
//! base/       base.tensors, curve.csv
//! concepts/   concepts.tensors, curve.csv, report.csv
//! pools/      pools.tensors, pools.csv
//! synthetic/  sample_*.pgm, metadata.csv, synthetic.tensors, suffixes.txt
//! evaluate/   metrics.csv, summary.txt
//! sweep/      sweep.csv, sweep.svg
//! ```
//!
//! Every stage directory also gets `MANIFEST` (sha256 per artifact) and
//! `run.log` (resolved config plus stage notes; not hashed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use sha2::{Digest, Sha256};

use crate::concepts::{
    assemble_condition, evaluate_concept_loss, init_concepts, learn_concepts, CategoryConcept, LabeledImage, Phrase,
    PromptSpec,
};
use crate::config::{RunConfig, SuffixProvider};
use crate::datio::dataset::{CONTEXT_TAGS, METACLASS, TEMPLATE_NAMES};
use crate::datio::{generate, generate_abundant, load_dataset, save_dataset, NamedTensor, ProceduralDataset, Split, TensorFile};
use crate::ddim::{build_inversion_pool, InversionPool, LatentInversion};
use crate::error::{Error, Result};
use crate::evalharness::{
    diversity, faithfulness, labeled_samples, labeled_split, sweep_csv, sweep_svg, train_downstream, train_oracle,
    Classifier, ClassifierConfig, Labeled, MetricsReport, SweepPoint, Toggles, VariantSource,
};
use crate::nnet::{pretrain_base, DenoiserParams, TrainItem, TrainReport};
use crate::schedule::NoiseSchedule;
use crate::synthesis::{
    external_suffix_provider, static_suffix_provider, synthesize_category, write_synthetic_set,
    HttpSummarizer, InterpMode, Origin, SuffixVocabulary, SyntheticSample,
};

pub const STAGE_DIRS: [&str; 7] = ["data", "base", "concepts", "pools", "synthetic", "evaluate", "sweep"];

/// Paths of every artifact under a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn dataset(&self) -> PathBuf {
        self.stage("data").join("dataset.tensors")
    }

    pub fn base(&self) -> PathBuf {
        self.stage("base").join("base.tensors")
    }

    pub fn concepts(&self) -> PathBuf {
        self.stage("concepts").join("concepts.tensors")
    }

    pub fn pools(&self) -> PathBuf {
        self.stage("pools").join("pools.tensors")
    }

    pub fn synthetic(&self) -> PathBuf {
        self.stage("synthetic").join("synthetic.tensors")
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage, path })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// `(relative path, sha256)` of every artifact in a stage directory.
pub fn stage_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_file() && name != "MANIFEST" && name != "run.log" {
            out.push((name, sha256_file(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `MANIFEST` and `run.log` for a finished stage.
fn finish(dir: &Path, cfg: &RunConfig, notes: &[String], started: Instant) -> Result<StageOutput> {
    let hashes = stage_hashes(dir)?;
    let manifest: String = hashes.iter().map(|(n, h)| format!("{h}  {n}\n")).collect();
    fs::write(dir.join("MANIFEST"), manifest)?;
    let mut log = String::from("# resolved configuration\n");
    log += &cfg.to_text();
    log += "# stage\n";
    for n in notes {
        let _ = writeln!(log, "{n}");
    }
    let _ = writeln!(log, "elapsed_seconds = {:.1}", started.elapsed().as_secs_f64());
    fs::write(dir.join("run.log"), log)?;
    Ok(StageOutput {
        dir: dir.to_path_buf(),
        artifacts: hashes,
        notes: notes.to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub artifacts: Vec<(String, String)>,
    pub notes: Vec<String>,
}

fn stage_dir(layout: &Layout, name: &str) -> Result<PathBuf> {
    let dir = layout.stage(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn metaclasses(cfg: &RunConfig) -> Vec<Phrase> {
    vec![Phrase::new(METACLASS, cfg.cond_dim)]
}

fn mean_of(parts: &[&[f64]]) -> Vec<f64> {
    let d = parts[0].len();
    (0..d).map(|j| parts.iter().map(|p| p[j]).sum::<f64>() / parts.len() as f64).collect()
}

/// Generic pretraining corpus: every glyph template in every context style.
/// Each image is paired with the bare metaclass prompt and, when captions
/// are enabled, with the three caption variants naming its glyph and/or its
/// context.
pub fn pretraining_corpus(cfg: &RunConfig) -> Result<(Split, Vec<(usize, Vec<f64>)>)> {
    let corpus = generate_abundant(
        TEMPLATE_NAMES.len(),
        CONTEXT_TAGS.len(),
        cfg.data.resolution,
        cfg.corpus_per_class,
        cfg.data.seed.wrapping_add(99),
    )?;
    let meta = Phrase::new(METACLASS, cfg.cond_dim).embedding;
    let words: Vec<Vec<f64>> = TEMPLATE_NAMES.iter().map(|w| Phrase::new(*w, cfg.cond_dim).embedding).collect();
    let ctxs: Vec<Vec<f64>> = CONTEXT_TAGS.iter().map(|w| Phrase::new(*w, cfg.cond_dim).embedding).collect();
    let mut conds = Vec::new();
    for (i, (&label, &ctx)) in corpus.labels.iter().zip(&corpus.contexts).enumerate() {
        conds.push((i, meta.clone()));
        if cfg.corpus_captions {
            let (w, c) = (&words[label - 1], &ctxs[ctx]);
            conds.push((i, mean_of(&[w, &meta])));
            conds.push((i, mean_of(&[&meta, c])));
            conds.push((i, mean_of(&[w, &meta, c])));
        }
    }
    Ok((corpus, conds))
}

fn params_file(params: &DenoiserParams, adapters_only: bool) -> TensorFile {
    let mut file = TensorFile::default();
    for (name, view) in params.named_tensors() {
        if adapters_only && !name.starts_with("adapter") {
            continue;
        }
        file.push(NamedTensor::from_f64(name, view.shape().to_vec(), view.iter().copied()));
    }
    file
}

/// Rebuilds parameters from checkpoint files; later files override earlier ones.
pub fn load_params(cfg: &RunConfig, sched: &NoiseSchedule, files: &[&TensorFile]) -> Result<DenoiserParams> {
    let mut named = BTreeMap::new();
    for f in files {
        for t in &f.tensors {
            if !t.name.starts_with("concept/") {
                named.insert(t.name.clone(), (t.shape.clone(), t.to_f64()));
            }
        }
    }
    DenoiserParams::from_named(cfg.denoiser_config(), sched, &named)
}

fn curve_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,running_loss\n");
    for (s, l) in &report.curve {
        let _ = writeln!(out, "{s},{l:.6}");
    }
    out
}

fn labeled_images(split: &Split) -> Vec<LabeledImage<'_>> {
    split
        .images
        .iter()
        .zip(&split.labels)
        .map(|(image, &category)| LabeledImage { image, category })
        .collect()
}

pub fn run_gen_data(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let dir = stage_dir(&layout, "data")?;
    let ds = generate(&cfg.data)?;
    save_dataset(&ds, &layout.dataset())?;
    let notes = vec![
        format!("train_images = {}", ds.train.len()),
        format!("test_images = {}", ds.test.len()),
    ];
    info!("data: {} train / {} test images", ds.train.len(), ds.test.len());
    finish(&dir, cfg, &notes, t0)
}

fn load_data(layout: &Layout) -> Result<ProceduralDataset> {
    load_dataset(&require(layout.dataset(), "gen-data")?)
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    require(layout.dataset(), "gen-data")?;
    let sched = cfg.schedule()?;
    let (corpus, conds) = pretraining_corpus(cfg)?;
    let items: Vec<TrainItem<'_>> = conds
        .iter()
        .map(|(i, c)| TrainItem {
            x0: &corpus.images[*i],
            cond: c,
        })
        .collect();
    let init = DenoiserParams::init(cfg.denoiser_config(), &sched, cfg.seed)?;
    info!("pretraining on {} (image, prompt) items for {} steps", items.len(), cfg.pretrain_steps);
    let (params, report) = pretrain_base(&init, &items, &sched, &cfg.pretrain_config())?;
    let dir = stage_dir(&layout, "base")?;
    let mut file = params_file(&params, false);
    file.set_meta("schedule_hash", sched.hash());
    file.set_meta("seed", cfg.seed);
    file.write(&layout.base())?;
    fs::write(dir.join("curve.csv"), curve_csv(&report))?;
    let notes = vec![
        format!("corpus_items = {}", items.len()),
        format!("initial_loss = {:.4}", report.initial_loss),
        format!("final_loss = {:.4}", report.final_loss),
    ];
    info!("pretrain: loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    finish(&dir, cfg, &notes, t0)
}

fn load_base(cfg: &RunConfig, layout: &Layout, sched: &NoiseSchedule) -> Result<(TensorFile, DenoiserParams)> {
    let file = TensorFile::read(&require(layout.base(), "pretrain")?)?;
    let params = load_params(cfg, sched, &[&file])?;
    Ok((file, params))
}

pub fn run_learn_concepts(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let ds = load_data(&layout)?;
    let sched = cfg.schedule()?;
    let (_, base) = load_base(cfg, &layout, &sched)?;
    let metas = metaclasses(cfg);
    let images = labeled_images(&ds.train);
    let ccfg = cfg.concept_config();
    let learned = learn_concepts(&base, &images, ds.spec.classes, 0, &metas, &sched, &ccfg)?;
    let initial = init_concepts(ds.spec.classes, &metas[0], &ccfg);
    let before = evaluate_concept_loss(&base, &images, &initial, 0, &metas, &sched, 20, cfg.seed)?;
    let after = evaluate_concept_loss(&learned.params, &images, &learned.concepts, 0, &metas, &sched, 20, cfg.seed)?;
    if base.base_checksum() != learned.params.base_checksum() {
        return Err(Error::param("concepts", "base tensors changed during concept learning"));
    }
    let dir = stage_dir(&layout, "concepts")?;
    let mut file = params_file(&learned.params, true);
    for c in &learned.concepts {
        for (j, token) in c.tokens.iter().enumerate() {
            file.push(NamedTensor::from_f64(c.checkpoint_name(j), vec![token.len()], token.iter().copied()));
        }
    }
    file.set_meta("categories", ds.spec.classes);
    file.set_meta("tokens", cfg.concept_tokens);
    file.set_meta("base_checksum", base.base_checksum());
    file.write(&layout.concepts())?;
    fs::write(dir.join("curve.csv"), curve_csv(&learned.report))?;
    fs::write(
        dir.join("report.csv"),
        format!("metric,value\nfixed_noise_loss_before,{before:.6}\nfixed_noise_loss_after,{after:.6}\n"),
    )?;
    let notes = vec![
        format!("fixed_noise_loss_before = {before:.4}"),
        format!("fixed_noise_loss_after = {after:.4}"),
    ];
    info!("concepts: fixed-noise loss {before:.3} -> {after:.3}");
    finish(&dir, cfg, &notes, t0)
}

fn load_concepts(
    cfg: &RunConfig,
    layout: &Layout,
    sched: &NoiseSchedule,
    base_file: &TensorFile,
) -> Result<(DenoiserParams, Vec<CategoryConcept>)> {
    let file = TensorFile::read(&require(layout.concepts(), "learn-concepts")?)?;
    let params = load_params(cfg, sched, &[base_file, &file])?;
    let categories: usize = file.meta_parse("categories")?;
    let tokens: usize = file.meta_parse("tokens")?;
    let mut concepts = Vec::with_capacity(categories);
    for category_id in 1..=categories {
        let toks = (0..tokens)
            .map(|j| Ok(file.get(&format!("concept/{category_id}/{j}"))?.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        concepts.push(CategoryConcept {
            category_id,
            tokens: toks,
        });
    }
    Ok((params, concepts))
}

fn plain_condition(concept: Option<&CategoryConcept>, metas: &[Phrase]) -> Result<Vec<f64>> {
    Ok(match concept {
        Some(c) => assemble_condition(&PromptSpec::plain(c, 0), metas, &[])?.0,
        None => metas[0].embedding.clone(),
    })
}

fn suffixed_conditions(concept: Option<&CategoryConcept>, metas: &[Phrase], vocab: &SuffixVocabulary) -> Result<Vec<Vec<f64>>> {
    (0..vocab.len())
        .map(|s| match concept {
            Some(c) => Ok(assemble_condition(&PromptSpec::plain(c, 0).with_suffix(s), metas, &vocab.phrases)?.0),
            None => Ok(mean_of(&[&metas[0].embedding, &vocab.phrases[s].embedding])),
        })
        .collect()
}

/// Inversion pools of every category under the given plain prompts.
pub fn build_pools(
    cfg: &RunConfig,
    ds: &ProceduralDataset,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plains: &[Vec<f64>],
) -> Result<Vec<InversionPool>> {
    (1..=ds.spec.classes)
        .map(|c| {
            let members: Vec<(usize, &[f64])> = ds
                .train
                .indices_of(c)
                .into_iter()
                .map(|i| (i, ds.train.images[i].as_slice()))
                .collect();
            build_inversion_pool(&members, c, &plains[c - 1], params, sched, cfg.ddim_steps, cfg.inversion_eval)
        })
        .collect()
}

pub fn run_invert(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let ds = load_data(&layout)?;
    let sched = cfg.schedule()?;
    let (base_file, _) = load_base(cfg, &layout, &sched)?;
    let (params, concepts) = load_concepts(cfg, &layout, &sched, &base_file)?;
    let metas = metaclasses(cfg);
    let plains = concepts
        .iter()
        .map(|c| plain_condition(Some(c), &metas))
        .collect::<Result<Vec<_>>>()?;
    let pools = build_pools(cfg, &ds, &params, &sched, &plains)?;
    let dir = stage_dir(&layout, "pools")?;
    let mut file = TensorFile::default();
    let mut table = String::from("image_id,category,prompt_hash,num_steps,schedule_hash\n");
    let mut stats = Vec::new();
    for pool in &pools {
        pool.validate()?;
        for e in &pool.entries {
            file.push(NamedTensor::from_f64(
                format!("pool/{}/{}", e.category_id, e.source_image_id),
                vec![e.latent.len()],
                e.latent.iter().copied(),
            ));
            let _ = writeln!(
                table,
                "{},{},{},{},{}",
                e.source_image_id, e.category_id, e.prompt_hash, e.num_steps, e.schedule_hash
            );
            stats.extend(e.latent.iter().copied());
        }
    }
    file.set_meta("categories", ds.spec.classes);
    file.write(&layout.pools())?;
    fs::write(dir.join("pools.csv"), table)?;
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let var = stats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let notes = vec![
        format!("latents = {}", pools.iter().map(InversionPool::len).sum::<usize>()),
        format!("latent_mean = {mean:.4}"),
        format!("latent_variance = {var:.4}"),
    ];
    info!("invert: pooled latent variance {var:.3}");
    finish(&dir, cfg, &notes, t0)
}

fn load_pools(cfg: &RunConfig, layout: &Layout, sched: &NoiseSchedule, plains: &[Vec<f64>]) -> Result<Vec<InversionPool>> {
    let file = TensorFile::read(&require(layout.pools(), "invert")?)?;
    let categories: usize = file.meta_parse("categories")?;
    let mut pools: Vec<InversionPool> = (1..=categories)
        .map(|category_id| InversionPool {
            category_id,
            entries: Vec::new(),
        })
        .collect();
    for t in &file.tensors {
        let parsed = t
            .name
            .strip_prefix("pool/")
            .and_then(|rest| rest.split_once('/'))
            .and_then(|(c, i)| Some((c.parse::<usize>().ok()?, i.parse::<usize>().ok()?)));
        let Some((c, id)) = parsed.filter(|(c, _)| (1..=categories).contains(c)) else {
            return Err(Error::Container(format!("unexpected tensor `{}` in pools", t.name)));
        };
        pools[c - 1].entries.push(LatentInversion {
            latent: t.to_f64(),
            source_image_id: id,
            category_id: c,
            prompt_hash: crate::ddim::prompt_hash(&plains[c - 1]),
            num_steps: cfg.ddim_steps,
            schedule_hash: sched.hash(),
        });
    }
    Ok(pools)
}

/// Suffix vocabulary per the configured provider. A failing external service
/// falls back to the static tags with a warning.
pub fn suffix_vocabulary(cfg: &RunConfig, ds: &ProceduralDataset) -> Result<SuffixVocabulary> {
    let tags = ds.train_tags();
    match (cfg.suffix_provider, &cfg.suffix_endpoint) {
        (SuffixProvider::External, Some(endpoint)) => external_suffix_provider(
            &HttpSummarizer::new(endpoint.clone()),
            &ds.train_captions(),
            METACLASS,
            cfg.cond_dim,
            Some(&tags),
        ),
        (SuffixProvider::External, None) => Err(Error::Config {
            field: "suffix.endpoint".into(),
            reason: "required by the external provider".into(),
        }),
        (SuffixProvider::Static, _) => static_suffix_provider(&tags, cfg.cond_dim),
    }
}

/// Everything needed to synthesize any ablation variant in memory.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub cfg: RunConfig,
    pub sched: NoiseSchedule,
    pub dataset: ProceduralDataset,
    pub metaclasses: Vec<Phrase>,
    pub vocab: SuffixVocabulary,
    pub base: DenoiserParams,
    pub tuned: DenoiserParams,
    pub concepts: Vec<CategoryConcept>,
    pub pools: Vec<InversionPool>,
    /// Pools inverted by the base model under the bare metaclass prompt.
    pub base_pools: Vec<InversionPool>,
}

impl Workbench {
    /// Assembles a workbench from trained pieces; inverts the base-model pools.
    pub fn new(
        cfg: RunConfig,
        dataset: ProceduralDataset,
        base: DenoiserParams,
        tuned: DenoiserParams,
        concepts: Vec<CategoryConcept>,
        pools: Option<Vec<InversionPool>>,
    ) -> Result<Self> {
        let sched = cfg.schedule()?;
        let metas = metaclasses(&cfg);
        let vocab = suffix_vocabulary(&cfg, &dataset)?;
        let plains = concepts
            .iter()
            .map(|c| plain_condition(Some(c), &metas))
            .collect::<Result<Vec<_>>>()?;
        let pools = match pools {
            Some(p) => p,
            None => build_pools(&cfg, &dataset, &tuned, &sched, &plains)?,
        };
        let meta_plain = vec![metas[0].embedding.clone(); dataset.spec.classes];
        let base_pools = build_pools(&cfg, &dataset, &base, &sched, &meta_plain)?;
        Ok(Self {
            cfg,
            sched,
            dataset,
            metaclasses: metas,
            vocab,
            base,
            tuned,
            concepts,
            pools,
            base_pools,
        })
    }

    /// Loads every upstream artifact of `cfg.out`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.out);
        let ds = load_data(&layout)?;
        let sched = cfg.schedule()?;
        let (base_file, base) = load_base(cfg, &layout, &sched)?;
        let (tuned, concepts) = load_concepts(cfg, &layout, &sched, &base_file)?;
        let metas = metaclasses(cfg);
        let plains = concepts
            .iter()
            .map(|c| plain_condition(Some(c), &metas))
            .collect::<Result<Vec<_>>>()?;
        let pools = load_pools(cfg, &layout, &sched, &plains)?;
        Self::new(cfg.clone(), ds, base, tuned, concepts, Some(pools))
    }

    /// Synthetic set of a variant at an explicit split ratio.
    pub fn synthesize_with(&self, toggles: &Toggles, seed: u64, split_ratio: f64) -> Result<Vec<SyntheticSample>> {
        toggles.validate()?;
        let mut scfg = self.cfg.synthesis_config();
        scfg.mode = toggles.interp_mode();
        scfg.seed = seed;
        scfg.two_stage.split_ratio = split_ratio;
        let (params, pools) = if toggles.concept_learning {
            (&self.tuned, &self.pools)
        } else {
            (&self.base, &self.base_pools)
        };
        let mut out = Vec::new();
        for pool in pools {
            let concept = toggles
                .concept_learning
                .then(|| &self.concepts[pool.category_id - 1]);
            let plain = plain_condition(concept, &self.metaclasses)?;
            let suffixed = if toggles.two_stage {
                suffixed_conditions(concept, &self.metaclasses, &self.vocab)?
            } else {
                Vec::new()
            };
            out.extend(synthesize_category(params, pool, &plain, &suffixed, &scfg, &self.sched)?);
        }
        Ok(out)
    }

    pub fn synthesize_default(&self) -> Result<Vec<SyntheticSample>> {
        let mut toggles = Toggles::FULL;
        toggles.spherical_interp = matches!(self.cfg.mode, InterpMode::Circle | InterpMode::Slerp);
        toggles.spherical_extrap = matches!(self.cfg.mode, InterpMode::Circle | InterpMode::Extrapolate);
        toggles.linear_interp = self.cfg.mode == InterpMode::Linear;
        self.synthesize_with(&toggles, self.cfg.seed, self.cfg.split_ratio)
    }
}

impl VariantSource for Workbench {
    fn synthesize(&self, toggles: &Toggles, seed: u64) -> Result<Vec<SyntheticSample>> {
        self.synthesize_with(toggles, seed, self.cfg.split_ratio)
    }
}

pub fn run_synthesize(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let bench = Workbench::load(cfg)?;
    let samples = bench.synthesize_default()?;
    let dir = stage_dir(&layout, "synthetic")?;
    write_synthetic_set(&dir, &samples, cfg.data.resolution)?;
    let mut file = TensorFile::default();
    let d = cfg.data.pixels();
    file.push(NamedTensor::from_f64(
        "images",
        vec![samples.len(), d],
        samples.iter().flat_map(|s| s.image.iter().copied()),
    ));
    file.push(NamedTensor::from_f64(
        "labels",
        vec![samples.len()],
        samples.iter().map(|s| s.category_id as f64),
    ));
    file.set_meta("provenance", bench.vocab.provenance.as_str());
    file.write(&layout.synthetic())?;
    let vocab: String = bench
        .vocab
        .phrases
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i}\t{}\n", p.text))
        .collect();
    fs::write(dir.join("suffixes.txt"), vocab)?;
    let from_noise = samples.iter().filter(|s| s.origin == Origin::Noise).count();
    let notes = vec![
        format!("samples = {}", samples.len()),
        format!("noise_started = {from_noise}"),
        format!("suffix_provenance = {}", bench.vocab.provenance.as_str()),
    ];
    info!("synthesize: {} samples ({} from noise)", samples.len(), from_noise);
    finish(&dir, cfg, &notes, t0)
}

/// Synthetic images and labels as written by the synthesize stage.
pub fn load_synthetic(layout: &Layout) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let file = TensorFile::read(&require(layout.synthetic(), "synthesize")?)?;
    let images = file.get("images")?;
    let labels: Vec<usize> = file.get("labels")?.data.iter().map(|&v| v as usize).collect();
    let d = images.shape.get(1).copied().unwrap_or(0).max(1);
    let rows = images.to_f64().chunks(d).map(<[f64]>::to_vec).collect();
    Ok((rows, labels))
}

/// Oracle trained on abundant regenerations of the dataset's templates.
pub fn reference_oracle(cfg: &RunConfig) -> Result<Classifier> {
    let spec = &cfg.data;
    let train = generate_abundant(spec.classes, spec.contexts, spec.resolution, cfg.oracle_per_class, spec.seed.wrapping_add(1234))?;
    let held = generate_abundant(
        spec.classes,
        spec.contexts,
        spec.resolution,
        cfg.oracle_test_per_class,
        spec.seed.wrapping_add(4321),
    )?;
    train_oracle(&labeled_split(&train), &labeled_split(&held), spec.classes, &ClassifierConfig::oracle(0))
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let ds = load_data(&layout)?;
    let (images, labels) = load_synthetic(&layout)?;
    let synthetic: Vec<Labeled<'_>> = images
        .iter()
        .zip(&labels)
        .map(|(image, &label)| Labeled { image, label })
        .collect();
    let oracle = reference_oracle(cfg)?;
    let original = labeled_split(&ds.train);
    let test = labeled_split(&ds.test);
    let down = cfg.downstream_config();
    let baseline = train_downstream(&original, &[], &test, ds.spec.classes, &{
        let mut d = down.clone();
        d.replacement = 0.0;
        d
    })?;
    let report = MetricsReport {
        diversity: diversity(&synthetic)?,
        faithfulness: faithfulness(&synthetic, &oracle)?,
        accuracy: train_downstream(&original, &synthetic, &test, ds.spec.classes, &down)?,
        baseline_accuracy: baseline,
        // the output location is in run.log; keep metrics comparable across directories
        config: cfg.entries().into_iter().filter(|(k, _)| k != "out").collect(),
    };
    report.validate()?;
    let dir = stage_dir(&layout, "evaluate")?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    fs::write(dir.join("summary.txt"), report.summary())?;
    let notes = vec![format!(
        "oracle_held_out_accuracy = {:.4}",
        oracle.validated_accuracy.unwrap_or(f64::NAN)
    )];
    info!("evaluate:\n{}", report.summary());
    finish(&dir, cfg, &notes, t0)
}

/// Seed-averaged diversity and faithfulness of the default variant at each ratio.
pub fn split_sweep(bench: &Workbench, oracle: &Classifier, ratios: &[f64], seeds: &[u64]) -> Result<(Vec<SweepPoint>, Vec<(f64, u64, f64, f64)>)> {
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &s in ratios {
        let (mut d, mut f) = (0.0, 0.0);
        for &seed in seeds {
            let samples = bench.synthesize_with(&Toggles::FULL, seed, s)?;
            let set = labeled_samples(&samples);
            let (ds, fs) = (diversity(&set)?, faithfulness(&set, oracle)?);
            rows.push((s, seed, ds, fs));
            d += ds;
            f += fs;
        }
        let n = seeds.len() as f64;
        points.push(SweepPoint {
            split_ratio: s,
            diversity: d / n,
            faithfulness: f / n,
        });
    }
    Ok((points, rows))
}

pub fn run_sweep_split(cfg: &RunConfig) -> Result<StageOutput> {
    let t0 = Instant::now();
    let layout = Layout::new(&cfg.out);
    let bench = Workbench::load(cfg)?;
    let oracle = reference_oracle(cfg)?;
    let (points, rows) = split_sweep(&bench, &oracle, &cfg.sweep_ratios, &cfg.sweep_seeds)?;
    let dir = stage_dir(&layout, "sweep")?;
    fs::write(dir.join("sweep.csv"), sweep_csv(&points))?;
    fs::write(dir.join("sweep.svg"), sweep_svg(&points))?;
    let mut per_seed = String::from("split_ratio,seed,diversity,faithfulness\n");
    for (s, seed, d, f) in &rows {
        let _ = writeln!(per_seed, "{s},{seed},{d:.6},{f:.6}");
    }
    fs::write(dir.join("sweep_by_seed.csv"), per_seed)?;
    let notes = points
        .iter()
        .map(|p| format!("s = {}: diversity {:.4}, faithfulness {:.4}", p.split_ratio, p.diversity, p.faithfulness))
        .collect::<Vec<_>>();
    finish(&dir, cfg, &notes, t0)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<StageOutput>> {
    Ok(vec![
        run_gen_data(cfg)?,
        run_pretrain(cfg)?,
        run_learn_concepts(cfg)?,
        run_invert(cfg)?,
        run_synthesize(cfg)?,
        run_evaluate(cfg)?,
    ])
}
