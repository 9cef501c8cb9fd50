//! Comparison systems: pooled-label pretraining, fine-tuning variants,
//! per-annotator heads, the prototype-similarity classifier and random
//! guessing.

use std::collections::BTreeMap;

use autodiff::{gradient, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{samples_batch, AnnotatorTask, FewShotSplit, Sample};
use crate::error::{contract, Result};
use crate::eval::score_probabilities;
use crate::meta::{adapt, finish_episode, meta_test, EpisodeOutcome, LslrTable, DEFAULT_INNER_LR};
use crate::metrics::{score, Scores};
use crate::model::{self, features, threshold_predictions, ClassBalanceWeights, HeadDims, LabelSet, ModelParams, Objective};
use crate::optim::{AdamW, AdamWConfig};

/// Every head tensor trainable.
pub const ALL_TRAINABLE: [bool; 5] = [true; 5];
/// Layer mixing and the output layer only; linear1 stays at initialization.
pub const LINEAR_TRAINABLE: [bool; 5] = [true, false, false, true, true];
/// Output layer only.
pub const HEAD_TRAINABLE: [bool; 5] = [false, false, false, true, true];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn minibatches<T: Clone>(items: &[T], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| items[i].clone()).collect())
        .collect()
}

/// One optimizer step on the trainable tensors; returns the batch loss.
fn optimizer_step(
    params: &mut ModelParams,
    trainable: &[bool; 5],
    samples: &[Sample],
    weights: &ClassBalanceWeights,
    opt: &mut AdamW,
) -> Result<f64> {
    let objective = samples_batch(samples)?.with_weights(weights)?;
    let vars: Vec<_> = params
        .tensors()
        .iter()
        .zip(trainable)
        .map(|(t, &train)| if train { autodiff::Var::param(t.clone()) } else { autodiff::Var::constant(t.clone()) })
        .collect();
    let loss = objective.loss(&vars)?;
    let slots: Vec<usize> = (0..5).filter(|&i| trainable[i]).collect();
    let grads = gradient(&loss, &slots.iter().map(|&i| vars[i].clone()).collect::<Vec<_>>())?;
    opt.begin_step();
    let mut tensors = params.tensors().to_vec();
    for (&i, g) in slots.iter().zip(&grads) {
        tensors[i] = opt.update_tensor(i, &tensors[i], g.value(), true);
    }
    *params = ModelParams::from_tensors(tensors)?;
    Ok(loss.value().item()?)
}

fn full_loss(params: &ModelParams, samples: &[Sample], weights: &ClassBalanceWeights) -> Result<f64> {
    model::loss(params, &samples_batch(samples)?, weights)
}

/// Supervised training of the head on every (utterance, annotator) pair of
/// the training tasks, keeping the epoch with the lowest validation loss.
pub fn pretrain_base(
    train: &[AnnotatorTask],
    val: Option<&AnnotatorTask>,
    init: &ModelParams,
    trainable: &[bool; 5],
    weights: &ClassBalanceWeights,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let pool: Vec<Sample> = train.iter().flat_map(|t| t.samples.iter().cloned()).collect();
    if pool.is_empty() {
        return contract("pretraining corpus is empty");
    }
    if cfg.batch_size == 0 {
        return contract("batch_size must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut opt = AdamW::new(cfg.optimizer, params.tensors().iter().map(Tensor::len));
    let val_loss = |p: &ModelParams| -> Result<Option<f64>> {
        val.filter(|v| !v.is_empty()).map(|v| full_loss(p, &v.samples, weights)).transpose()
    };

    let mut best = (params.clone(), 0, val_loss(&params)?);
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: full_loss(&params, &pool, weights)?,
        val_loss: best.2,
    }];
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = minibatches(&pool, cfg.batch_size, &mut rng);
        for b in &batches {
            total += optimizer_step(&mut params, trainable, b, weights, &mut opt)? * b.len() as f64;
        }
        let v = val_loss(&params)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / pool.len() as f64,
            val_loss: v,
        });
        let improved = match (v, best.2) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if improved {
            best = (params.clone(), epoch, v);
        }
    }
    Ok(PretrainOutcome {
        params: best.0,
        best_epoch: best.1,
        log,
    })
}

/// Fine-tunes every head tensor on the K samples with a fixed rate.
pub fn entire_few(
    base: &ModelParams,
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    rate: f64,
    steps: usize,
) -> Result<EpisodeOutcome> {
    meta_test(base, &LslrTable::uniform(rate, 1), split, weights, steps)
}

/// Fine-tunes only the layer mixing and output layer.
pub fn linear_few(
    base: &ModelParams,
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    rate: f64,
    steps: usize,
) -> Result<EpisodeOutcome> {
    adapt_masked(base, &LINEAR_TRAINABLE, split, weights, rate, steps)
}

fn adapt_masked(
    base: &ModelParams,
    trainable: &[bool; 5],
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    rate: f64,
    steps: usize,
) -> Result<EpisodeOutcome> {
    let objective = split.train_batch()?.with_weights(weights)?;
    let params = adapt(base, trainable, &objective, |_, _| rate, steps)?;
    finish_episode(params, split, weights, steps)
}

/// Evaluates `base` with no adaptation.
pub fn entire_zero(base: &ModelParams, split: &FewShotSplit, weights: &ClassBalanceWeights) -> Result<EpisodeOutcome> {
    meta_test(base, &LslrTable::uniform(DEFAULT_INNER_LR, 1), split, weights, 0)
}

/// Shared layer mixing and linear1 with one output layer per annotator.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    trunk: [Tensor; 3],
    heads: BTreeMap<String, [Tensor; 2]>,
}

impl MultiHeadParams {
    pub fn new(init: &ModelParams, annotators: impl IntoIterator<Item = String>) -> Self {
        let t = init.tensors();
        Self {
            trunk: [t[0].clone(), t[1].clone(), t[2].clone()],
            heads: annotators.into_iter().map(|a| (a, [t[3].clone(), t[4].clone()])).collect(),
        }
    }

    pub fn annotators(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }

    /// The single-head model for `annotator`.
    pub fn export(&self, annotator: &str) -> Option<ModelParams> {
        let head = self.heads.get(annotator)?;
        ModelParams::from_tensors(self.trunk.iter().chain(head).cloned().collect()).ok()
    }

    /// The trunk with a freshly initialized output layer.
    pub fn with_new_head(&self, dims: HeadDims, seed: u64) -> ModelParams {
        let fresh = ModelParams::init_random(dims, &mut ChaCha8Rng::seed_from_u64(seed));
        let f = fresh.tensors();
        ModelParams::from_tensors(self.trunk.iter().cloned().chain([f[3].clone(), f[4].clone()]).collect())
            .expect("trunk and fresh head agree")
    }
}

/// Trains the shared trunk and per-annotator heads; every minibatch comes
/// from a single annotator and updates the trunk and that annotator's head.
pub fn pretrain_multi_head(
    train: &[AnnotatorTask],
    init: &ModelParams,
    weights: &ClassBalanceWeights,
    cfg: &PretrainConfig,
) -> Result<MultiHeadParams> {
    if train.iter().all(AnnotatorTask::is_empty) {
        return contract("multi-head training corpus is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MultiHeadParams::new(init, train.iter().map(|t| t.annotator_id.clone()));
    let ids: Vec<String> = model.heads.keys().cloned().collect();
    let slot_of = |id: &str| ids.iter().position(|i| i == id).expect("known head");
    let mut lens: Vec<usize> = model.trunk.iter().map(Tensor::len).collect();
    for head in model.heads.values() {
        lens.extend(head.iter().map(Tensor::len));
    }
    let mut opt = AdamW::new(cfg.optimizer, lens);

    for _ in 0..cfg.epochs {
        let mut batches: Vec<(String, Vec<Sample>)> = Vec::new();
        for task in train.iter().filter(|t| !t.is_empty()) {
            for b in minibatches(&task.samples, cfg.batch_size, &mut rng) {
                batches.push((task.annotator_id.clone(), b));
            }
        }
        batches.shuffle(&mut rng);
        for (id, b) in batches {
            let mut params = model.export(&id).expect("head exists");
            let objective = samples_batch(&b)?.with_weights(weights)?;
            let vars = params.leaves();
            let loss = objective.loss(&vars)?;
            let grads = gradient(&loss, &vars)?;
            opt.begin_step();
            let k = slot_of(&id);
            let slots = [0, 1, 2, 3 + 2 * k, 4 + 2 * k];
            let tensors: Vec<Tensor> = params
                .tensors()
                .iter()
                .zip(&grads)
                .zip(slots)
                .map(|((p, g), slot)| opt.update_tensor(slot, p, g.value(), true))
                .collect();
            params = ModelParams::from_tensors(tensors)?;
            let t = params.into_tensors();
            model.trunk = [t[0].clone(), t[1].clone(), t[2].clone()];
            model.heads.insert(id, [t[3].clone(), t[4].clone()]);
        }
    }
    Ok(model)
}

/// Attaches a fresh output layer for the held-out annotator and trains only
/// that layer on the K samples.
pub fn multi_few(
    model: &MultiHeadParams,
    dims: HeadDims,
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    rate: f64,
    steps: usize,
    head_seed: u64,
) -> Result<EpisodeOutcome> {
    let start = model.with_new_head(dims, head_seed);
    adapt_masked(&start, &HEAD_TRAINABLE, split, weights, rate, steps)
}

/// Emotion centers of pooled base-model features.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    classes: usize,
    centers: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    /// Each center is the mean feature of the samples carrying that emotion.
    pub fn build(features: &[Vec<f64>], labels: &[LabelSet]) -> Result<Self> {
        if features.len() != labels.len() || labels.is_empty() {
            return contract("prototypes need one non-empty label set per feature");
        }
        let classes = labels[0].classes();
        let dim = features[0].len();
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (f, l) in features.iter().zip(labels) {
            for c in l.indices() {
                let entry = sums.entry(c).or_insert_with(|| (vec![0.0; dim], 0));
                entry.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                entry.1 += 1;
            }
        }
        Ok(Self {
            classes,
            centers: sums
                .into_iter()
                .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        })
    }

    pub fn from_centers(classes: usize, centers: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        if centers.is_empty() || centers.keys().any(|&c| c >= classes) {
            return contract("prototype classes must be non-empty and in range");
        }
        Ok(Self { classes, centers })
    }

    pub fn covered(&self) -> Vec<usize> {
        self.centers.keys().copied().collect()
    }

    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.centers.get(&class).map(Vec::as_slice)
    }

    /// Softmax of cosine similarities to each center, in `covered()` order.
    /// `None` when `f` (or a center) has zero norm.
    pub fn distribution(&self, f: &[f64]) -> Option<Vec<f64>> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nf = norm(f);
        if nf == 0.0 {
            return None;
        }
        let mut sims = Vec::with_capacity(self.centers.len());
        for c in self.centers.values() {
            let nc = norm(c);
            if nc == 0.0 {
                return None;
            }
            sims.push(c.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / (nc * nf));
        }
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Some(exps.into_iter().map(|e| e / z).collect())
    }

    /// Thresholded label set over all classes; only covered emotions can be positive.
    pub fn predict(&self, f: &[f64]) -> LabelSet {
        let covered = self.covered();
        let p = self.distribution(f).unwrap_or_else(|| {
            log::warn!("zero-norm feature; scoring with the uniform distribution");
            vec![1.0 / covered.len() as f64; covered.len()]
        });
        let local = threshold_predictions(&p);
        let mut flags = vec![false; self.classes];
        for (i, &c) in covered.iter().enumerate() {
            flags[c] = local.contains(i);
        }
        LabelSet::new(flags).expect("threshold keeps at least one class")
    }
}

fn feature_rows(base: &ModelParams, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let f = features(base, &samples_batch(samples)?)?;
    let dim = f.shape()[1];
    Ok(f.data().chunks(dim).map(<[f64]>::to_vec).collect())
}

/// Cosine-similarity prototype classifier over base-model features.
pub fn entire_sim(base: &ModelParams, split: &FewShotSplit) -> Result<Scores> {
    let train_labels: Vec<LabelSet> = split.train.iter().map(|s| s.labels.clone()).collect();
    let protos = PrototypeSet::build(&feature_rows(base, &split.train)?, &train_labels)?;
    let preds: Vec<LabelSet> = feature_rows(base, &split.test)?.iter().map(|f| protos.predict(f)).collect();
    let gold: Vec<LabelSet> = split.test.iter().map(|s| s.labels.clone()).collect();
    score(&preds, &gold)
}

/// Standard-normal logits, softmax, then the usual threshold.
pub fn random_baseline(test: &[Sample], classes: usize, seed: u64) -> Result<Scores> {
    if test.is_empty() {
        return contract("random baseline needs evaluation samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..test.len() * classes).map(|_| rng.sample(StandardNormal)).collect();
    let probs = Tensor::new(&[test.len(), classes], logits)?.softmax()?;
    score_probabilities(&probs, test.iter().map(|s| &s.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_prototype_closed_form() {
        let centers = BTreeMap::from([(0, vec![1.0, 0.0]), (4, vec![0.0, 1.0])]);
        let p = PrototypeSet::from_centers(9, centers).unwrap();
        let d = p.distribution(&[2.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((d[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert_eq!(p.predict(&[2.0, 0.0]).indices(), vec![0]);
    }

    #[test]
    fn zero_feature_gets_uniform_distribution() {
        let centers = BTreeMap::from([(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]);
        let p = PrototypeSet::from_centers(9, centers).unwrap();
        assert!(p.distribution(&[0.0, 0.0]).is_none());
        assert_eq!(p.predict(&[0.0, 0.0]).indices(), vec![1, 2]);
    }

    #[test]
    fn linear_mask_counts_parameters() {
        let dims = HeadDims {
            layers: 3,
            dim: 4,
            hidden: 5,
            classes: 9,
        };
        let p = ModelParams::zeros(dims);
        let n: usize = p.tensors().iter().zip(LINEAR_TRAINABLE).filter(|(_, t)| *t).map(|(x, _)| x.len()).sum();
        assert_eq!(n, 3 + 5 * 9 + 9);
    }
}
