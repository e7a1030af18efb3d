//! Run configuration: flat `section.key = value` text.
//!
//! Every key has a default; a config file only lists overrides. Blank lines
//! and `#` comments are ignored. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::concepts::ConceptConfig;
use crate::datio::DatasetSpec;
use crate::ddim::InversionEval;
use crate::error::{Error, Result};
use crate::evalharness::{ClassifierConfig, DownstreamConfig};
use crate::nnet::{DenoiserConfig, Optimizer, TrainConfig};
use crate::schedule::NoiseSchedule;
use crate::synthesis::{InterpMode, SynthesisConfig, TwoStageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuffixProvider {
    Static,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub rank: usize,
    pub adapted_layers: Vec<usize>,

    pub data: DatasetSpec,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_optimizer: Optimizer,
    /// Images per glyph template in the generic corpus.
    pub corpus_per_class: usize,
    /// Train on caption variants (word, context) besides the bare metaclass.
    pub corpus_captions: bool,
    pub pretrain_max_loss: Option<f64>,

    pub concept_tokens: usize,
    pub concept_steps: usize,
    pub concept_lr: f64,
    pub concept_batch: usize,
    pub concept_optimizer: Optimizer,
    pub concept_init_sigma: f64,

    pub ddim_steps: usize,
    pub inversion_eval: InversionEval,

    pub split_ratio: f64,
    pub expansion: usize,
    pub mode: InterpMode,

    pub suffix_provider: SuffixProvider,
    pub suffix_endpoint: Option<String>,

    pub replacement: f64,
    pub eval_seeds: Vec<u64>,
    pub oracle_per_class: usize,
    pub oracle_test_per_class: usize,

    pub sweep_ratios: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 256,
            cond_dim: 32,
            time_dim: 32,
            rank: 4,
            adapted_layers: vec![0, 1, 2],
            data: DatasetSpec::default(),
            pretrain_steps: 20_000,
            pretrain_lr: 1e-3,
            pretrain_batch: 64,
            pretrain_optimizer: Optimizer::Sgd,
            corpus_per_class: 200,
            corpus_captions: true,
            pretrain_max_loss: None,
            concept_tokens: 2,
            concept_steps: 2000,
            concept_lr: 1e-2,
            concept_batch: 32,
            concept_optimizer: Optimizer::adam(),
            concept_init_sigma: 0.01,
            ddim_steps: 50,
            inversion_eval: InversionEval::Target,
            split_ratio: 0.3,
            expansion: 5,
            mode: InterpMode::Circle,
            suffix_provider: SuffixProvider::Static,
            suffix_endpoint: None,
            replacement: 0.5,
            eval_seeds: vec![1, 2, 3, 4, 5],
            oracle_per_class: 500,
            oracle_test_per_class: 100,
            sweep_ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            sweep_seeds: vec![1, 2, 3],
        }
    }
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| cfg_err(field, format!("cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(field: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(field, s))
        .collect()
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(field, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_optimizer(field: &str, v: &str) -> Result<Optimizer> {
    match v {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::adam()),
        _ => Err(cfg_err(field, format!("expected sgd or adam, got `{v}`"))),
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::Adam { .. } => "adam",
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(&format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "schedule.total_steps" => self.schedule_steps = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.cond_dim" => self.cond_dim = parse(key, v)?,
            "model.time_dim" => self.time_dim = parse(key, v)?,
            "model.rank" => self.rank = parse(key, v)?,
            "model.adapted_layers" => self.adapted_layers = parse_list(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.shots" => self.data.shots = parse(key, v)?,
            "data.contexts" => self.data.contexts = parse(key, v)?,
            "data.resolution" => self.data.resolution = parse(key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.shot_overrides" => {
                let mut map = BTreeMap::new();
                for pair in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (c, n) = pair
                        .split_once(':')
                        .ok_or_else(|| cfg_err(key, format!("expected class:shots, got `{pair}`")))?;
                    map.insert(parse(key, c.trim())?, parse(key, n.trim())?);
                }
                self.data.shot_overrides = map;
            }
            "pretrain.steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain.learning_rate" => self.pretrain_lr = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain_batch = parse(key, v)?,
            "pretrain.optimizer" => self.pretrain_optimizer = parse_optimizer(key, v)?,
            "pretrain.corpus_per_class" => self.corpus_per_class = parse(key, v)?,
            "pretrain.captions" => self.corpus_captions = parse_bool(key, v)?,
            "pretrain.max_final_loss" => {
                self.pretrain_max_loss = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "concepts.tokens" => self.concept_tokens = parse(key, v)?,
            "concepts.steps" => self.concept_steps = parse(key, v)?,
            "concepts.learning_rate" => self.concept_lr = parse(key, v)?,
            "concepts.batch_size" => self.concept_batch = parse(key, v)?,
            "concepts.optimizer" => self.concept_optimizer = parse_optimizer(key, v)?,
            "concepts.init_sigma" => self.concept_init_sigma = parse(key, v)?,
            "ddim.steps" => self.ddim_steps = parse(key, v)?,
            "ddim.inversion_eval" => {
                self.inversion_eval = match v {
                    "target" => InversionEval::Target,
                    "source" => InversionEval::Source,
                    _ => return Err(cfg_err(key, format!("expected target or source, got `{v}`"))),
                }
            }
            "synthesis.split_ratio" => self.split_ratio = parse(key, v)?,
            "synthesis.expansion" => self.expansion = parse(key, v)?,
            "synthesis.mode" => self.mode = v.parse().map_err(|e: Error| cfg_err(key, e.to_string()))?,
            "suffix.provider" => {
                self.suffix_provider = match v {
                    "static" => SuffixProvider::Static,
                    "external" => SuffixProvider::External,
                    _ => return Err(cfg_err(key, format!("expected static or external, got `{v}`"))),
                }
            }
            "suffix.endpoint" => self.suffix_endpoint = (!v.is_empty()).then(|| v.to_string()),
            "evaluate.replacement" => self.replacement = parse(key, v)?,
            "evaluate.seeds" => self.eval_seeds = parse_list(key, v)?,
            "evaluate.oracle_per_class" => self.oracle_per_class = parse(key, v)?,
            "evaluate.oracle_test_per_class" => self.oracle_test_per_class = parse(key, v)?,
            "sweep.ratios" => self.sweep_ratios = parse_list(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_list(key, v)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Every resolved key and value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let overrides: Vec<String> = self
            .data
            .shot_overrides
            .iter()
            .map(|(c, n)| format!("{c}:{n}"))
            .collect();
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("seed", self.seed.to_string()),
            e("out", self.out.display().to_string()),
            e("schedule.total_steps", self.schedule_steps.to_string()),
            e("schedule.beta_start", self.beta_start.to_string()),
            e("schedule.beta_end", self.beta_end.to_string()),
            e("model.hidden", self.hidden.to_string()),
            e("model.cond_dim", self.cond_dim.to_string()),
            e("model.time_dim", self.time_dim.to_string()),
            e("model.rank", self.rank.to_string()),
            e("model.adapted_layers", join(&self.adapted_layers)),
            e("data.classes", self.data.classes.to_string()),
            e("data.shots", self.data.shots.to_string()),
            e("data.contexts", self.data.contexts.to_string()),
            e("data.resolution", self.data.resolution.to_string()),
            e("data.test_per_class", self.data.test_per_class.to_string()),
            e("data.seed", self.data.seed.to_string()),
            e("data.shot_overrides", overrides.join(",")),
            e("pretrain.steps", self.pretrain_steps.to_string()),
            e("pretrain.learning_rate", self.pretrain_lr.to_string()),
            e("pretrain.batch_size", self.pretrain_batch.to_string()),
            e("pretrain.optimizer", optimizer_name(self.pretrain_optimizer).into()),
            e("pretrain.corpus_per_class", self.corpus_per_class.to_string()),
            e("pretrain.captions", self.corpus_captions.to_string()),
            e(
                "pretrain.max_final_loss",
                self.pretrain_max_loss.map_or("none".into(), |v| v.to_string()),
            ),
            e("concepts.tokens", self.concept_tokens.to_string()),
            e("concepts.steps", self.concept_steps.to_string()),
            e("concepts.learning_rate", self.concept_lr.to_string()),
            e("concepts.batch_size", self.concept_batch.to_string()),
            e("concepts.optimizer", optimizer_name(self.concept_optimizer).into()),
            e("concepts.init_sigma", self.concept_init_sigma.to_string()),
            e("ddim.steps", self.ddim_steps.to_string()),
            e(
                "ddim.inversion_eval",
                match self.inversion_eval {
                    InversionEval::Target => "target",
                    InversionEval::Source => "source",
                }
                .into(),
            ),
            e("synthesis.split_ratio", self.split_ratio.to_string()),
            e("synthesis.expansion", self.expansion.to_string()),
            e("synthesis.mode", self.mode.as_str().into()),
            e(
                "suffix.provider",
                match self.suffix_provider {
                    SuffixProvider::Static => "static",
                    SuffixProvider::External => "external",
                }
                .into(),
            ),
            e("suffix.endpoint", self.suffix_endpoint.clone().unwrap_or_default()),
            e("evaluate.replacement", self.replacement.to_string()),
            e("evaluate.seeds", join(&self.eval_seeds)),
            e("evaluate.oracle_per_class", self.oracle_per_class.to_string()),
            e("evaluate.oracle_test_per_class", self.oracle_test_per_class.to_string()),
            e("sweep.ratios", join(&self.sweep_ratios)),
            e("sweep.seeds", join(&self.sweep_seeds)),
        ]
    }

    /// Text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks every section; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidParameter { field, reason } => Error::Config { field, reason },
            other => other,
        };
        self.schedule().map_err(|e| match e {
            Error::InvalidParameter { reason, .. } => cfg_err("schedule", reason),
            other => other,
        })?;
        self.denoiser_config().validate().map_err(wrap)?;
        self.data.validate().map_err(wrap)?;
        for (field, lr) in [("pretrain.learning_rate", self.pretrain_lr), ("concepts.learning_rate", self.concept_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(cfg_err(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("pretrain.batch_size", self.pretrain_batch),
            ("pretrain.corpus_per_class", self.corpus_per_class),
            ("concepts.tokens", self.concept_tokens),
            ("concepts.batch_size", self.concept_batch),
            ("synthesis.expansion", self.expansion),
            ("evaluate.oracle_per_class", self.oracle_per_class),
            ("evaluate.oracle_test_per_class", self.oracle_test_per_class),
        ] {
            if v == 0 {
                return Err(cfg_err(field, "must be positive"));
            }
        }
        if !(self.concept_init_sigma >= 0.0 && self.concept_init_sigma.is_finite()) {
            return Err(cfg_err("concepts.init_sigma", "must be non-negative"));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.schedule_steps {
            return Err(cfg_err("ddim.steps", format!("must be within 1..={}", self.schedule_steps)));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(cfg_err("synthesis.split_ratio", format!("{} outside [0, 1]", self.split_ratio)));
        }
        if !(0.0..=1.0).contains(&self.replacement) {
            return Err(cfg_err("evaluate.replacement", format!("{} outside [0, 1]", self.replacement)));
        }
        if self.eval_seeds.is_empty() {
            return Err(cfg_err("evaluate.seeds", "need at least one seed"));
        }
        if self.sweep_seeds.is_empty() {
            return Err(cfg_err("sweep.seeds", "need at least one seed"));
        }
        if self.sweep_ratios.is_empty() || self.sweep_ratios.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(cfg_err("sweep.ratios", "need ratios within [0, 1]"));
        }
        if self.suffix_provider == SuffixProvider::External && self.suffix_endpoint.is_none() {
            return Err(cfg_err("suffix.endpoint", "required by the external provider (or set SUFFIX_ENDPOINT)"));
        }
        Ok(())
    }

    /// Applies the only two environment overrides: `SUFFIX_ENDPOINT` sets the
    /// external endpoint, `OUT_ROOT` prefixes a relative output directory.
    pub fn apply_env(&mut self, out_root: Option<&str>, endpoint: Option<&str>) {
        if let Some(ep) = endpoint.filter(|e| !e.is_empty()) {
            self.suffix_endpoint = Some(ep.to_string());
        }
        if let Some(root) = out_root.filter(|r| !r.is_empty()) {
            if self.out.is_relative() {
                self.out = Path::new(root).join(&self.out);
            }
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: self.data.pixels(),
            hidden: self.hidden,
            cond_dim: self.cond_dim,
            time_dim: self.time_dim,
            total_steps: self.schedule_steps,
            rank: self.rank,
            adapted_layers: self.adapted_layers.clone(),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.pretrain_lr,
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            seed: self.seed,
            optimizer: self.pretrain_optimizer,
            max_final_loss: self.pretrain_max_loss,
        }
    }

    pub fn concept_config(&self) -> ConceptConfig {
        ConceptConfig {
            train: TrainConfig {
                learning_rate: self.concept_lr,
                steps: self.concept_steps,
                batch_size: self.concept_batch,
                seed: self.seed.wrapping_add(1),
                optimizer: self.concept_optimizer,
                max_final_loss: None,
            },
            tokens_per_category: self.concept_tokens,
            init_sigma: self.concept_init_sigma,
        }
    }

    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig {
            two_stage: TwoStageConfig {
                split_ratio: self.split_ratio,
                num_steps: self.ddim_steps,
            },
            expansion: self.expansion,
            mode: self.mode,
            seed: self.seed,
        }
    }

    pub fn downstream_config(&self) -> DownstreamConfig {
        DownstreamConfig {
            replacement: self.replacement,
            seeds: self.eval_seeds.clone(),
            classifier: ClassifierConfig::downstream(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\n\nsynthesis.split_ratio = 0.5  # trailing\ndata.shot_overrides = 2:1, 3:2\nconcepts.optimizer = sgd\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.split_ratio, 0.5);
        assert_eq!(cfg.data.shots_for(2), 1);
        assert_eq!(cfg.data.shots_for(3), 2);
        assert_eq!(cfg.concept_optimizer, Optimizer::Sgd);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn environment_overrides() {
        let mut cfg = RunConfig::parse("out = runs/a\nsuffix.provider = external").unwrap();
        cfg.apply_env(Some("/tmp/root"), Some("http://127.0.0.1:9/summarize"));
        assert_eq!(cfg.out, PathBuf::from("/tmp/root/runs/a"));
        assert_eq!(cfg.suffix_endpoint.as_deref(), Some("http://127.0.0.1:9/summarize"));
        cfg.validate().unwrap();
        let mut abs = RunConfig::parse("out = /abs").unwrap();
        abs.apply_env(Some("/tmp/root"), None);
        assert_eq!(abs.out, PathBuf::from("/abs"));
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(RunConfig::parse("nope.key = 1").unwrap_err()), "nope.key");
        assert_eq!(field_of(RunConfig::parse("ddim.steps = many").unwrap_err()), "ddim.steps");
        assert_eq!(field_of(RunConfig::parse("just text").unwrap_err()), "line 1");
        let bad = |text: &str| field_of(RunConfig::parse(text).unwrap().validate().unwrap_err());
        assert_eq!(bad("synthesis.split_ratio = 1.5"), "synthesis.split_ratio");
        assert_eq!(bad("data.resolution = 20"), "data.resolution");
        assert_eq!(bad("model.time_dim = 3"), "model.time_dim");
        assert_eq!(bad("ddim.steps = 2000"), "ddim.steps");
        assert_eq!(bad("suffix.provider = external"), "suffix.endpoint");
        assert_eq!(bad("schedule.beta_end = 2"), "schedule");
    }
}
