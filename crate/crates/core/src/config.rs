//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma-separated.
//! Unknown keys and malformed values are errors naming the key.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::PretrainConfig;
use crate::error::{PerserError, Result};
use crate::experiment::Method;
use crate::meta::MetaConfig;
use crate::metrics::Scenario;
use crate::model::{DEFAULT_BETA, DEFAULT_HIDDEN};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Free-form tag naming the embedding source, copied into reports.
    pub upstream: String,
    /// Annotation manifest; when unset a synthetic corpus is generated.
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub preset: String,
    pub annotators: usize,
    pub samples_per_annotator: usize,
    pub corpus_seed: u64,
    /// Annotators with fewer records are dropped at load time; 0 means the
    /// largest shot count plus Q.
    pub min_records: usize,
    pub hidden: usize,
    pub beta: f64,
    pub seed: u64,
    /// Use the pretrained base model as the meta-learning initialization.
    pub ini: bool,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
    pub finetune_lr: f64,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub seeds: usize,
    /// Held-out annotators, one rotation each; empty means every annotator.
    pub test_annotators: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Seen,
            upstream: "synthetic".into(),
            manifest: None,
            embeddings: None,
            out_dir: PathBuf::from("out"),
            preset: "iemocap-ext".into(),
            annotators: 10,
            samples_per_annotator: 600,
            corpus_seed: 7,
            min_records: 0,
            hidden: DEFAULT_HIDDEN,
            beta: DEFAULT_BETA,
            seed: 0,
            ini: true,
            meta: MetaConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune_lr: crate::meta::DEFAULT_INNER_LR,
            methods: Method::ALL.to_vec(),
            shots: vec![2, 4, 8, 16, 32, 64],
            seeds: 10,
            test_annotators: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| PerserError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(PerserError::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PerserError::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PerserError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| PerserError::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.meta;
        match key {
            "scenario" => self.scenario = parse(key, value)?,
            "upstream" => self.upstream = value.to_string(),
            "manifest" => self.manifest = optional_path(value),
            "embeddings" => self.embeddings = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "preset" => self.preset = value.to_string(),
            "annotators" => self.annotators = parse(key, value)?,
            "samples_per_annotator" => self.samples_per_annotator = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "min_records" => self.min_records = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ini" => self.ini = parse_bool(key, value)?,
            "csmt" => m.csmt = parse_bool(key, value)?,
            "da" => m.da = parse_bool(key, value)?,
            "lslr" => m.lslr = parse_bool(key, value)?,
            "inner_steps" => m.inner_steps = parse(key, value)?,
            "test_steps" => m.test_steps = parse(key, value)?,
            "shots_train" => m.shots = parse(key, value)?,
            "queries" => m.queries = parse(key, value)?,
            "meta_batch" => m.meta_batch = parse(key, value)?,
            "outer_steps" => m.outer_steps = parse(key, value)?,
            "val_interval" => m.val_interval = parse(key, value)?,
            "val_episodes" => m.val_episodes = parse(key, value)?,
            "outer_lr" => m.outer.lr = parse(key, value)?,
            "weight_decay" => m.outer.weight_decay = parse(key, value)?,
            "inner_lr" => m.inner_lr = parse(key, value)?,
            "first_order_fraction" => m.first_order_fraction = parse(key, value)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain_batch" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain_lr" => self.pretrain.optimizer.lr = parse(key, value)?,
            "finetune_lr" => self.finetune_lr = parse(key, value)?,
            "methods" => self.methods = parse_list(key, value)?,
            "shots" => self.shots = parse_list(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "test_annotators" => self.test_annotators = parse_list(key, value)?,
            _ => return Err(PerserError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its canonical value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.meta;
        let mut out = vec![
            ("scenario", self.scenario.to_string()),
            ("upstream", self.upstream.clone()),
            ("manifest", path_or_empty(&self.manifest)),
            ("embeddings", path_or_empty(&self.embeddings)),
            ("out_dir", self.out_dir.display().to_string()),
            ("preset", self.preset.clone()),
            ("annotators", self.annotators.to_string()),
            ("samples_per_annotator", self.samples_per_annotator.to_string()),
            ("corpus_seed", self.corpus_seed.to_string()),
            ("min_records", self.min_records.to_string()),
            ("hidden", self.hidden.to_string()),
            ("beta", format!("{:?}", self.beta)),
            ("seed", self.seed.to_string()),
            ("ini", self.ini.to_string()),
            ("csmt", m.csmt.to_string()),
            ("da", m.da.to_string()),
            ("lslr", m.lslr.to_string()),
            ("inner_steps", m.inner_steps.to_string()),
            ("test_steps", m.test_steps.to_string()),
            ("shots_train", m.shots.to_string()),
            ("queries", m.queries.to_string()),
            ("meta_batch", m.meta_batch.to_string()),
            ("outer_steps", m.outer_steps.to_string()),
            ("val_interval", m.val_interval.to_string()),
            ("val_episodes", m.val_episodes.to_string()),
            ("outer_lr", format!("{:?}", m.outer.lr)),
            ("weight_decay", format!("{:?}", m.outer.weight_decay)),
            ("inner_lr", format!("{:?}", m.inner_lr)),
            ("first_order_fraction", format!("{:?}", m.first_order_fraction)),
            ("pretrain_epochs", self.pretrain.epochs.to_string()),
            ("pretrain_batch", self.pretrain.batch_size.to_string()),
            ("pretrain_lr", format!("{:?}", self.pretrain.optimizer.lr)),
            ("finetune_lr", format!("{:?}", self.finetune_lr)),
            ("methods", join(&self.methods)),
            ("shots", join(&self.shots)),
            ("seeds", self.seeds.to_string()),
            ("test_annotators", self.test_annotators.join(",")),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the settings that affect results (output location excluded).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries().iter().filter(|(k, _)| *k != "out_dir") {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(PerserError::config(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("annotators", self.annotators)?;
        positive("samples_per_annotator", self.samples_per_annotator)?;
        positive("hidden", self.hidden)?;
        positive("inner_steps", self.meta.inner_steps)?;
        positive("shots_train", self.meta.shots)?;
        positive("queries", self.meta.queries)?;
        positive("meta_batch", self.meta.meta_batch)?;
        positive("val_interval", self.meta.val_interval)?;
        positive("pretrain_batch", self.pretrain.batch_size)?;
        positive("seeds", self.seeds)?;
        if !(0.0..1.0).contains(&self.beta) {
            return Err(PerserError::config("beta", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.meta.first_order_fraction) {
            return Err(PerserError::config("first_order_fraction", "must lie in [0, 1]"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(PerserError::config("shots", "must be a non-empty list of positive counts"));
        }
        if !self.meta.csmt && self.meta.shots < 2 {
            return Err(PerserError::config("shots_train", "support/query training needs at least 2"));
        }
        if self.manifest.is_some() != self.embeddings.is_some() {
            let key = if self.manifest.is_some() { "embeddings" } else { "manifest" };
            return Err(PerserError::config(key, "manifest and embeddings must be given together"));
        }
        for (key, v) in [
            ("outer_lr", self.meta.outer.lr),
            ("inner_lr", self.meta.inner_lr),
            ("pretrain_lr", self.pretrain.optimizer.lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PerserError::config(key, "must be a finite non-negative rate"));
            }
        }
        Ok(())
    }

    /// Meta-learning settings with the run seed applied.
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: self.seed,
            ..self.meta.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }
}
