//! End-to-end experiment driver: data loading, annotator rotations,
//! training of every selected system, few-shot evaluation over seeds and
//! shot counts, and the toggle ablation grid.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, MultiHeadParams, ALL_TRAINABLE, LINEAR_TRAINABLE};
use crate::config::ExperimentConfig;
use crate::corpus::{
    all_labels, exclude_sparse, generate_synthetic, load_manifest, sample_episode, split_seen, split_unseen,
    AnnotatorTask, DataSplit, SynthPreset, EMOTIONS,
};
use crate::error::{PerserError, Result};
use crate::meta::{meta_test, meta_train, LslrTable, MetaTrainOutcome};
use crate::metrics::{summarize, EpisodeReport, Scenario, Scores, SummaryRow};
use crate::model::{ClassBalanceWeights, HeadDims, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    EntireZero,
    EntireSim,
    MultiFew,
    LinearFew,
    EntireFew,
    MetaPerser,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Random,
        Method::EntireZero,
        Method::EntireSim,
        Method::MultiFew,
        Method::LinearFew,
        Method::EntireFew,
        Method::MetaPerser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::EntireZero => "entire-zero",
            Method::EntireSim => "entire-sim",
            Method::MultiFew => "multi-few",
            Method::LinearFew => "linear-few",
            Method::EntireFew => "entire-few",
            Method::MetaPerser => "meta-perser",
        }
    }

    fn needs_base(self) -> bool {
        matches!(self, Method::EntireZero | Method::EntireSim | Method::EntireFew)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Annotator tasks for the configured data source, with sparse annotators dropped.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<AnnotatorTask>> {
    let tasks = match (&cfg.manifest, &cfg.embeddings) {
        (Some(m), Some(e)) => {
            for (key, path) in [("manifest", m), ("embeddings", e)] {
                if !path.exists() {
                    return Err(PerserError::config(key, format!("{} does not exist", path.display())));
                }
            }
            load_manifest(m, e)?
        }
        _ => {
            let preset = SynthPreset::by_name(&cfg.preset)
                .ok_or_else(|| PerserError::config("preset", format!("unknown preset `{}`", cfg.preset)))?;
            generate_synthetic(&preset, cfg.annotators, cfg.samples_per_annotator, cfg.corpus_seed)?.tasks()?
        }
    };
    let threshold = if cfg.min_records == 0 {
        cfg.shots.iter().copied().max().unwrap_or(0).max(cfg.meta.shots) + cfg.meta.queries
    } else {
        cfg.min_records
    };
    Ok(exclude_sparse(tasks, threshold))
}

/// (test, validation) annotator pairs. Each test annotator is paired with
/// the next annotator in id order.
pub fn rotations(tasks: &[AnnotatorTask], cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.annotator_id.as_str()).collect();
    ids.sort_unstable();
    if ids.len() < 3 {
        return Err(PerserError::Contract(format!(
            "need at least 3 annotators (test, validation, training), have {}",
            ids.len()
        )));
    }
    let tests: Vec<String> = if cfg.test_annotators.is_empty() {
        ids.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.test_annotators.clone()
    };
    tests
        .into_iter()
        .map(|t| {
            let pos = ids
                .iter()
                .position(|&i| i == t)
                .ok_or_else(|| PerserError::UnknownAnnotator(t.clone()))?;
            let val = ids[(pos + 1) % ids.len()].to_string();
            Ok((t, val))
        })
        .collect()
}

pub fn split_for(cfg: &ExperimentConfig, tasks: &[AnnotatorTask], test: &str, val: &str) -> Result<DataSplit> {
    match cfg.scenario {
        Scenario::Seen => split_seen(tasks, test, val),
        Scenario::Unseen => split_unseen(tasks, test, val),
    }
}

pub fn head_dims(tasks: &[AnnotatorTask], hidden: usize) -> Result<HeadDims> {
    let first = tasks
        .iter()
        .flat_map(|t| t.samples.first())
        .next()
        .ok_or_else(|| PerserError::Contract("no training samples".into()))?;
    Ok(HeadDims {
        layers: first.embedding.layers(),
        dim: first.embedding.dim(),
        hidden,
        classes: EMOTIONS.len(),
    })
}

/// Everything trained for one rotation.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub dims: HeadDims,
    pub weights: ClassBalanceWeights,
    pub init: ModelParams,
    pub base: Option<ModelParams>,
    pub linear: Option<ModelParams>,
    pub multi: Option<MultiHeadParams>,
    pub meta: Option<(ModelParams, LslrTable)>,
}

/// Models restored from checkpoints instead of being trained.
#[derive(Debug, Clone, Default)]
pub struct Preloaded {
    pub base: Option<ModelParams>,
    pub meta: Option<(ModelParams, LslrTable)>,
}

pub fn class_weights(cfg: &ExperimentConfig, split: &DataSplit) -> Result<ClassBalanceWeights> {
    ClassBalanceWeights::from_labels(cfg.beta, EMOTIONS.len(), all_labels(&split.train))
}

pub fn initial_params(cfg: &ExperimentConfig, dims: HeadDims) -> ModelParams {
    ModelParams::init_random(dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn pretrain(cfg: &ExperimentConfig, split: &DataSplit, init: &ModelParams, weights: &ClassBalanceWeights) -> Result<ModelParams> {
    Ok(baselines::pretrain_base(&split.train, Some(&split.val), init, &ALL_TRAINABLE, weights, &cfg.pretrain_config())?.params)
}

/// Meta-trains from the pretrained base (INI on) or from `init`.
pub fn meta_learn(
    cfg: &ExperimentConfig,
    split: &DataSplit,
    init: &ModelParams,
    base: Option<&ModelParams>,
    weights: &ClassBalanceWeights,
) -> Result<MetaTrainOutcome> {
    let start = if cfg.ini {
        base.ok_or_else(|| PerserError::Contract("INI requires a pretrained base model".into()))?
    } else {
        init
    };
    meta_train(start, &split.train, Some(&split.val), weights, &cfg.meta_config())
}

/// Trains whatever the selected methods need and is not preloaded.
pub fn train_rotation(cfg: &ExperimentConfig, split: &DataSplit, preloaded: Preloaded) -> Result<TrainedModels> {
    let dims = head_dims(&split.train, cfg.hidden)?;
    let weights = class_weights(cfg, split)?;
    let init = initial_params(cfg, dims);
    let wants = |m: Method| cfg.methods.contains(&m);
    let needs_base = cfg.methods.iter().any(|m| m.needs_base()) || (wants(Method::MetaPerser) && cfg.ini && preloaded.meta.is_none());
    let base = match preloaded.base {
        Some(b) => Some(b),
        None if needs_base => Some(pretrain(cfg, split, &init, &weights)?),
        None => None,
    };
    let linear = if wants(Method::LinearFew) {
        let out = baselines::pretrain_base(&split.train, Some(&split.val), &init, &LINEAR_TRAINABLE, &weights, &cfg.pretrain_config())?;
        Some(out.params)
    } else {
        None
    };
    let multi = if wants(Method::MultiFew) {
        Some(baselines::pretrain_multi_head(&split.train, &init, &weights, &cfg.pretrain_config())?)
    } else {
        None
    };
    let meta = match preloaded.meta {
        Some(m) => Some(m),
        None if wants(Method::MetaPerser) => {
            let out = meta_learn(cfg, split, &init, base.as_ref(), &weights)?;
            Some((out.params, out.lslr))
        }
        None => None,
    };
    Ok(TrainedModels {
        dims,
        weights,
        init,
        base,
        linear,
        multi,
        meta,
    })
}

fn missing(what: &str) -> PerserError {
    PerserError::Contract(format!("{what} was not trained"))
}

/// Scores one method on one episode.
pub fn run_method(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    method: Method,
    split: &crate::corpus::FewShotSplit,
) -> Result<Scores> {
    let steps = cfg.meta.test_steps;
    let w = &models.weights;
    let base = || models.base.as_ref().ok_or_else(|| missing("base model"));
    Ok(match method {
        Method::Random => baselines::random_baseline(&split.test, EMOTIONS.len(), split.seed)?,
        Method::EntireZero => baselines::entire_zero(base()?, split, w)?.scores,
        Method::EntireSim => baselines::entire_sim(base()?, split)?,
        Method::EntireFew => baselines::entire_few(base()?, split, w, cfg.finetune_lr, steps)?.scores,
        Method::LinearFew => {
            let p = models.linear.as_ref().ok_or_else(|| missing("linear model"))?;
            baselines::linear_few(p, split, w, cfg.finetune_lr, steps)?.scores
        }
        Method::MultiFew => {
            let m = models.multi.as_ref().ok_or_else(|| missing("multi-head model"))?;
            baselines::multi_few(m, models.dims, split, w, cfg.finetune_lr, steps, split.seed)?.scores
        }
        Method::MetaPerser => {
            let (params, lslr) = models.meta.as_ref().ok_or_else(|| missing("meta-learned model"))?;
            meta_test(params, lslr, split, w, steps)?.scores
        }
    })
}

/// Every (method, shots, seed) episode for the held-out annotator.
pub fn evaluate_rotation(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    test: &AnnotatorTask,
    methods: &[Method],
    shots: &[usize],
) -> Result<Vec<EpisodeReport>> {
    let digest = cfg.digest();
    let jobs: Vec<(usize, u64)> = shots
        .iter()
        .flat_map(|&k| (0..cfg.seeds as u64).map(move |s| (k, s)))
        .collect();
    let per_job: Vec<Vec<EpisodeReport>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let episode = sample_episode(test, k, cfg.meta.queries, seed)?;
            methods
                .iter()
                .map(|&m| {
                    let s = run_method(cfg, models, m, &episode)?;
                    Ok(EpisodeReport {
                        method: m.to_string(),
                        scenario: cfg.scenario,
                        upstream: cfg.upstream.clone(),
                        annotator: test.annotator_id.clone(),
                        seed,
                        shots: k,
                        ma_f1: s.ma_f1,
                        mi_f1: s.mi_f1,
                        ua: s.ua,
                        config_digest: digest.clone(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<EpisodeReport>,
    pub summary: Vec<SummaryRow>,
}

/// Full protocol: for every rotation, train the selected systems and
/// evaluate them over all shot counts and seeds.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    let mut reports = Vec::new();
    for (test, val) in rotations(&tasks, cfg)? {
        log::info!("rotation: test {test}, validation {val}");
        let split = split_for(cfg, &tasks, &test, &val)?;
        let models = train_rotation(cfg, &split, Preloaded::default())?;
        reports.extend(evaluate_rotation(cfg, &models, &split.test, &cfg.methods, &cfg.shots)?);
    }
    let summary = summarize(&reports)?;
    Ok(RunOutput { reports, summary })
}

/// One row of the toggle grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub ini: bool,
    pub csmt: bool,
    pub da: bool,
    pub lslr: bool,
}

impl Toggles {
    /// No enhancement, initialization alone, each technique on top of
    /// initialization, then everything.
    pub const GRID: [Toggles; 6] = [
        Toggles::new(false, false, false, false),
        Toggles::new(true, false, false, false),
        Toggles::new(true, true, false, false),
        Toggles::new(true, false, true, false),
        Toggles::new(true, false, false, true),
        Toggles::new(true, true, true, true),
    ];

    pub const fn new(ini: bool, csmt: bool, da: bool, lslr: bool) -> Self {
        Self { ini, csmt, da, lslr }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.ini = self.ini;
        c.meta.csmt = self.csmt;
        c.meta.da = self.da;
        c.meta.lslr = self.lslr;
        c
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [("INI", self.ini), ("CSMT", self.csmt), ("DA", self.da), ("LSLR", self.lslr)]
            .into_iter()
            .filter(|(_, v)| *v)
            .map(|(n, _)| n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub summary: SummaryRow,
    pub reports: Vec<EpisodeReport>,
}

/// Meta-learning with every toggle combination of the grid, evaluated at
/// the training shot count. The base model is pretrained once per rotation
/// and shared by the rows that use it.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    let rots = rotations(&tasks, cfg)?;
    let mut per_row: Vec<Vec<EpisodeReport>> = vec![Vec::new(); Toggles::GRID.len()];
    for (test, val) in &rots {
        let split = split_for(cfg, &tasks, test, val)?;
        let dims = head_dims(&split.train, cfg.hidden)?;
        let weights = class_weights(cfg, &split)?;
        let init = initial_params(cfg, dims);
        let base = pretrain(cfg, &split, &init, &weights)?;
        for (row, toggles) in Toggles::GRID.iter().enumerate() {
            let c = toggles.apply(cfg);
            log::info!("ablation {}: test {test}", toggles.label());
            let meta = meta_learn(&c, &split, &init, Some(&base), &weights)?;
            let models = TrainedModels {
                dims,
                weights: weights.clone(),
                init: init.clone(),
                base: Some(base.clone()),
                linear: None,
                multi: None,
                meta: Some((meta.params, meta.lslr)),
            };
            per_row[row].extend(evaluate_rotation(&c, &models, &split.test, &[Method::MetaPerser], &[c.meta.shots])?);
        }
    }
    Toggles::GRID
        .iter()
        .zip(per_row)
        .map(|(t, reports)| {
            let summary = crate::metrics::aggregate(&reports)?;
            Ok(AblationRow {
                toggles: *t,
                summary,
                reports,
            })
        })
        .collect()
}
