//! Second-order MAML with combined-set meta-training, derivative annealing
//! and learned per-layer per-step inner learning rates.
//!
//! The inner loop is unrolled on the autodiff graph, so the outer gradient
//! flows through every inner update. Annealed (first-order) steps wrap the
//! inner gradient in `stop_gradient`, which removes their second-order
//! terms while keeping the dependence on the learned rate.

use std::collections::HashSet;

use autodiff::{gradient, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode, samples_batch, AnnotatorTask, FewShotSplit, Sample};
use crate::error::{contract, PerserError, Result};
use crate::eval::evaluate;
use crate::metrics::Scores;
use crate::model::{ClassBalanceWeights, ModelParams, Objective, WeightedBatch, LAYER_NAMES, TENSOR_LAYER};
use crate::optim::{AdamW, AdamWConfig};

pub const DEFAULT_INNER_LR: f64 = 0.001;
pub const DEFAULT_FIRST_ORDER_FRACTION: f64 = 0.3;

/// Inner learning rates, one per (named layer, inner step).
#[derive(Debug, Clone, PartialEq)]
pub struct LslrTable {
    layers: usize,
    steps: usize,
    rates: Vec<f64>,
}

impl LslrTable {
    pub fn uniform(rate: f64, steps: usize) -> Self {
        Self::uniform_layers(LAYER_NAMES.len(), rate, steps)
    }

    pub fn uniform_layers(layers: usize, rate: f64, steps: usize) -> Self {
        Self {
            layers,
            steps,
            rates: vec![rate; layers * steps],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [layers, steps] if *layers > 0 && *steps > 0 => Ok(Self {
                layers: *layers,
                steps: *steps,
                rates: t.to_vec(),
            }),
            other => Err(PerserError::Shape(format!("rate table must be layers × steps, got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.layers, self.steps], self.rates.clone()).expect("consistent")
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.rates
    }

    /// Rate for `layer` at 1-based inner step `step`; steps past the end of
    /// the table reuse its last column.
    pub fn rate(&self, layer: usize, step: usize) -> f64 {
        self.rates[layer * self.steps + step.clamp(1, self.steps) - 1]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.rates
    }

    /// Graph handles for the rates: differentiable leaves when `learnable`,
    /// constants otherwise.
    pub fn vars(&self, learnable: bool) -> RateGrid {
        let make = |v: f64| {
            let t = Tensor::scalar(v);
            if learnable {
                Var::param(t)
            } else {
                Var::constant(t)
            }
        };
        RateGrid {
            steps: self.steps,
            vars: self.rates.iter().map(|&v| make(v)).collect(),
        }
    }
}

/// Graph handles for a rate table.
pub struct RateGrid {
    steps: usize,
    vars: Vec<Var>,
}

impl RateGrid {
    fn get(&self, layer: usize, step: usize) -> &Var {
        &self.vars[layer * self.steps + step.clamp(1, self.steps) - 1]
    }
}

/// Which inner steps are first-order: step `s` (1-based) is first-order iff
/// `s ≤ ceil(first_order_fraction · steps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub first_order_fraction: f64,
    pub steps: usize,
}

impl AnnealSchedule {
    pub fn new(first_order_fraction: f64, steps: usize) -> Self {
        Self { first_order_fraction, steps }
    }

    pub fn second_order(steps: usize) -> Self {
        Self::new(0.0, steps)
    }

    pub fn first_order_steps(&self) -> usize {
        // Guard against 0.3 · 10 = 3.0000000000000004 rounding up to 4.
        let raw = self.first_order_fraction.clamp(0.0, 1.0) * self.steps as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.steps)
    }

    pub fn is_first_order(&self, step: usize) -> bool {
        step <= self.first_order_steps()
    }
}

/// Unrolls `steps` inner updates `θ ← θ − α[l, s] · ∇L(θ)` on the graph.
///
/// The result stays connected to `theta` and to the rate variables, except
/// through the gradients of first-order steps.
pub fn inner_adapt(
    theta: &[Var],
    layer_of: &[usize],
    objective: &dyn Objective,
    rates: &RateGrid,
    schedule: &AnnealSchedule,
    steps: usize,
) -> Result<Vec<Var>> {
    if steps == 0 {
        return contract("inner adaptation needs at least one step");
    }
    let mut current = theta.to_vec();
    for step in 1..=steps {
        let loss = objective.loss(&current)?;
        let grads = gradient(&loss, &current)?;
        let first_order = schedule.is_first_order(step);
        current = current
            .iter()
            .zip(grads)
            .zip(layer_of)
            .map(|((param, grad), &layer)| {
                let grad = if first_order { grad.stop_gradient() } else { grad };
                Ok(param.sub(&grad.mul_scalar(rates.get(layer, step))?)?)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(current)
}

/// Plain (non-differentiable-through) gradient adaptation.
///
/// Tensors with `trainable[i] == false` are left bitwise untouched.
pub fn adapt_tensors(
    theta: &[Tensor],
    layer_of: &[usize],
    trainable: &[bool],
    objective: &dyn Objective,
    rate: impl Fn(usize, usize) -> f64,
    steps: usize,
) -> Result<Vec<Tensor>> {
    let mut current = theta.to_vec();
    for step in 1..=steps {
        let vars: Vec<Var> = current
            .iter()
            .zip(trainable)
            .map(|(t, &train)| if train { Var::param(t.clone()) } else { Var::constant(t.clone()) })
            .collect();
        let loss = objective.loss(&vars)?;
        let trained: Vec<usize> = (0..vars.len()).filter(|&i| trainable[i]).collect();
        let wrt: Vec<Var> = trained.iter().map(|&i| vars[i].clone()).collect();
        let grads = gradient(&loss, &wrt)?;
        for (&i, g) in trained.iter().zip(grads) {
            let update = g.value().scale(rate(layer_of[i], step));
            current[i] = current[i].sub(&update)?;
        }
    }
    Ok(current)
}

/// [`adapt_tensors`] over head parameters.
pub fn adapt(
    theta: &ModelParams,
    trainable: &[bool; 5],
    objective: &WeightedBatch,
    rate: impl Fn(usize, usize) -> f64,
    steps: usize,
) -> Result<ModelParams> {
    let out = adapt_tensors(theta.tensors(), &TENSOR_LAYER, trainable, objective, rate, steps)?;
    ModelParams::from_tensors(out)
}

/// One task of a meta-batch. `outer` is `None` under combined-set training,
/// where the outer loss reuses the inner set.
pub struct MetaTask<O> {
    pub inner: O,
    pub outer: Option<O>,
}

impl<O> MetaTask<O> {
    pub fn combined(set: O) -> Self {
        Self { inner: set, outer: None }
    }
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub theta: Vec<Tensor>,
    /// Same layout as the rate table; zero when rates are not learned.
    pub rates: Vec<f64>,
    /// Mean post-adaptation outer loss.
    pub loss: f64,
}

struct TaskGradient {
    theta: Vec<Vec<f64>>,
    rates: Vec<f64>,
    loss: f64,
}

fn task_gradient<O: Objective>(
    theta: &[Tensor],
    layer_of: &[usize],
    lslr: &LslrTable,
    learn_rates: bool,
    task: &MetaTask<O>,
    schedule: &AnnealSchedule,
    steps: usize,
) -> Result<TaskGradient> {
    let leaves: Vec<Var> = theta.iter().cloned().map(Var::param).collect();
    let rates = lslr.vars(learn_rates);
    let adapted = inner_adapt(&leaves, layer_of, &task.inner, &rates, schedule, steps)?;
    let outer_set = task.outer.as_ref().unwrap_or(&task.inner);
    let outer = outer_set.loss(&adapted)?;
    let mut wrt = leaves;
    if learn_rates {
        wrt.extend(rates.vars.iter().cloned());
    }
    let grads = gradient(&outer, &wrt)?;
    let (theta_grads, rate_grads) = grads.split_at(theta.len());
    Ok(TaskGradient {
        theta: theta_grads.iter().map(|g| g.value().to_vec()).collect(),
        rates: if learn_rates {
            rate_grads.iter().map(|g| g.value().data()[0]).collect()
        } else {
            vec![0.0; lslr.values().len()]
        },
        loss: outer.value().item()?,
    })
}

/// Mean over tasks of `∇_{θ, α} L(inner_adapt(θ, α), outer set)`.
///
/// Tasks are unrolled in parallel; their contributions are summed in task
/// order, so results are deterministic.
pub fn meta_gradient<O: Objective + Sync>(
    theta: &[Tensor],
    layer_of: &[usize],
    lslr: &LslrTable,
    learn_rates: bool,
    tasks: &[MetaTask<O>],
    schedule: &AnnealSchedule,
    steps: usize,
) -> Result<MetaGradient> {
    if tasks.is_empty() {
        return contract("meta-gradient needs at least one task");
    }
    let per_task: Vec<TaskGradient> = tasks
        .par_iter()
        .map(|t| task_gradient(theta, layer_of, lslr, learn_rates, t, schedule, steps))
        .collect::<Result<_>>()?;

    let n = tasks.len() as f64;
    let mut theta_acc: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut rate_acc = vec![0.0; lslr.values().len()];
    let mut loss = 0.0;
    for tg in &per_task {
        for (acc, g) in theta_acc.iter_mut().zip(&tg.theta) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        rate_acc.iter_mut().zip(&tg.rates).for_each(|(a, b)| *a += b);
        loss += tg.loss;
    }
    Ok(MetaGradient {
        theta: theta_acc
            .into_iter()
            .zip(theta)
            .map(|(g, t)| Tensor::new(t.shape(), g.into_iter().map(|v| v / n).collect()).expect("shape"))
            .collect(),
        rates: rate_acc.into_iter().map(|v| v / n).collect(),
        loss: loss / n,
    })
}

/// Combined-set meta-gradient of the emotion head: each sampled set is used
/// for both the inner updates and the outer loss.
pub fn meta_gradient_csmt(
    theta: &ModelParams,
    lslr: &LslrTable,
    learn_rates: bool,
    episodes: &[WeightedBatch],
    schedule: &AnnealSchedule,
    steps: usize,
) -> Result<MetaGradient> {
    let tasks: Vec<MetaTask<WeightedBatch>> = episodes.iter().cloned().map(MetaTask::combined).collect();
    meta_gradient(theta.tensors(), &TENSOR_LAYER, lslr, learn_rates, &tasks, schedule, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner steps unrolled during meta-training.
    pub inner_steps: usize,
    /// Adaptation steps at meta-test time.
    pub test_steps: usize,
    /// Examples sampled per task (K).
    pub shots: usize,
    /// Evaluation samples per validation episode (Q).
    pub queries: usize,
    pub meta_batch: usize,
    pub outer_steps: usize,
    pub val_interval: usize,
    pub val_episodes: usize,
    pub outer: AdamWConfig,
    pub inner_lr: f64,
    /// Combined-set training; off splits each sampled set into support and query halves.
    pub csmt: bool,
    /// Derivative annealing; off makes every inner step second-order.
    pub da: bool,
    pub first_order_fraction: f64,
    /// Learn per-layer per-step rates; off keeps them fixed at `inner_lr`.
    pub lslr: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            test_steps: 50,
            shots: 32,
            queries: 128,
            meta_batch: 4,
            outer_steps: 300,
            val_interval: 50,
            val_episodes: 4,
            outer: AdamWConfig::default(),
            inner_lr: DEFAULT_INNER_LR,
            csmt: true,
            da: true,
            first_order_fraction: DEFAULT_FIRST_ORDER_FRACTION,
            lslr: true,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn schedule(&self) -> AnnealSchedule {
        let fraction = if self.da { self.first_order_fraction } else { 0.0 };
        AnnealSchedule::new(fraction, self.inner_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.shots == 0 || self.meta_batch == 0 {
            return contract("inner_steps, shots and meta_batch must be at least 1");
        }
        if !self.csmt && self.shots < 2 {
            return contract("support/query training needs at least 2 shots");
        }
        if self.val_interval == 0 {
            return contract("val_interval must be at least 1");
        }
        Ok(())
    }
}

/// Per-task parameters after adaptation.
#[derive(Debug, Clone)]
pub struct AdaptedParams {
    pub params: ModelParams,
    pub task: String,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub adapted: AdaptedParams,
    pub scores: Scores,
    /// Class-balanced loss on the evaluation samples after adaptation.
    pub loss: f64,
}

fn check_disjoint(split: &FewShotSplit) -> Result<()> {
    let train: HashSet<&str> = split.train.iter().map(|s| s.utt_id.as_str()).collect();
    if let Some(s) = split.test.iter().find(|s| train.contains(s.utt_id.as_str())) {
        return contract(format!("utterance {} is in both few-shot sets", s.utt_id));
    }
    Ok(())
}

/// Adapts on the K samples with `test_steps` plain LSLR updates (one batch),
/// then scores the Q samples. Inputs are not modified.
pub fn meta_test(
    theta: &ModelParams,
    lslr: &LslrTable,
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    test_steps: usize,
) -> Result<EpisodeOutcome> {
    check_disjoint(split)?;
    let params = if test_steps == 0 {
        theta.clone()
    } else {
        let objective = split.train_batch()?.with_weights(weights)?;
        adapt(theta, &[true; 5], &objective, |layer, step| lslr.rate(layer, step), test_steps)?
    };
    finish_episode(params, split, weights, test_steps)
}

pub(crate) fn finish_episode(
    params: ModelParams,
    split: &FewShotSplit,
    weights: &ClassBalanceWeights,
    steps: usize,
) -> Result<EpisodeOutcome> {
    let test = split.test_batch()?;
    let scores = evaluate(&params, &test, split.test.iter().map(|s| &s.labels))?;
    let loss = crate::model::loss(&params, &test, weights)?;
    Ok(EpisodeOutcome {
        adapted: AdaptedParams {
            params,
            task: split.annotator_id.clone(),
            steps,
        },
        scores,
        loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLogEntry {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub params: ModelParams,
    pub lslr: LslrTable,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub log: Vec<MetaLogEntry>,
}

fn draw_examples(task: &AnnotatorTask, count: usize, rng: &mut ChaCha8Rng, warned: &mut HashSet<String>) -> Vec<Sample> {
    if task.len() >= count {
        index::sample(rng, task.len(), count)
            .into_iter()
            .map(|i| task.samples[i].clone())
            .collect()
    } else {
        if warned.insert(task.annotator_id.clone()) {
            log::warn!(
                "annotator {} has {} examples, fewer than {count}; sampling with replacement",
                task.annotator_id,
                task.len()
            );
        }
        (0..count)
            .map(|_| task.samples[rng.random_range(0..task.len())].clone())
            .collect()
    }
}

/// Mean post-adaptation class-balanced loss over fixed validation episodes.
pub fn validation_loss(
    params: &ModelParams,
    lslr: &LslrTable,
    episodes: &[FewShotSplit],
    weights: &ClassBalanceWeights,
    test_steps: usize,
) -> Result<f64> {
    let losses: Vec<f64> = episodes
        .par_iter()
        .map(|e| meta_test(params, lslr, e, weights, test_steps).map(|o| o.loss))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fixed validation episodes drawn from the validation annotator.
pub fn validation_episodes(val: &AnnotatorTask, cfg: &MetaConfig) -> Result<Vec<FewShotSplit>> {
    (0..cfg.val_episodes)
        .map(|i| sample_episode(val, cfg.shots, cfg.queries, cfg.seed.wrapping_add(1_000_003 * (i as u64 + 1))))
        .collect()
}

/// Meta-trains θ and the rate table jointly with AdamW. With a validation
/// task, the checkpoint with the lowest post-adaptation validation loss is
/// returned; otherwise the final one.
pub fn meta_train(
    init: &ModelParams,
    train: &[AnnotatorTask],
    val: Option<&AnnotatorTask>,
    weights: &ClassBalanceWeights,
    cfg: &MetaConfig,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || train.iter().any(AnnotatorTask::is_empty) {
        return contract("meta-training needs non-empty training tasks");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = cfg.schedule();
    let mut params = init.clone();
    let mut lslr = LslrTable::uniform(cfg.inner_lr, cfg.inner_steps);
    let mut opt = AdamW::new(cfg.outer, params.tensors().iter().map(Tensor::len).chain([lslr.values().len()]));
    let rate_slot = params.tensors().len();

    let val_set = val.map(|v| validation_episodes(v, cfg)).transpose()?;
    let mut log = Vec::new();
    let mut best = (params.clone(), lslr.clone(), 0usize, None::<f64>);
    let mut warned = HashSet::new();

    let mut check = |step: usize, params: &ModelParams, lslr: &LslrTable, train_loss: Option<f64>, log: &mut Vec<MetaLogEntry>| -> Result<()> {
        let val_loss = match &val_set {
            Some(eps) => Some(validation_loss(params, lslr, eps, weights, cfg.test_steps)?),
            None => None,
        };
        let improved = match (val_loss, best.3) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = (params.clone(), lslr.clone(), step, val_loss);
        }
        log.push(MetaLogEntry {
            step,
            train_loss,
            val_loss,
            best: improved,
        });
        Ok(())
    };
    check(0, &params, &lslr, None, &mut log)?;

    for step in 1..=cfg.outer_steps {
        let picks: Vec<usize> = if cfg.meta_batch <= train.len() {
            index::sample(&mut rng, train.len(), cfg.meta_batch).into_vec()
        } else {
            (0..cfg.meta_batch).map(|_| rng.random_range(0..train.len())).collect()
        };
        let mut tasks = Vec::with_capacity(picks.len());
        for &p in &picks {
            let examples = draw_examples(&train[p], cfg.shots, &mut rng, &mut warned);
            let task = if cfg.csmt {
                MetaTask::combined(samples_batch(&examples)?.with_weights(weights)?)
            } else {
                let half = examples.len() / 2;
                MetaTask {
                    inner: samples_batch(&examples[..half])?.with_weights(weights)?,
                    outer: Some(samples_batch(&examples[half..])?.with_weights(weights)?),
                }
            };
            tasks.push(task);
        }
        let grad = meta_gradient(
            params.tensors(),
            &TENSOR_LAYER,
            &lslr,
            cfg.lslr,
            &tasks,
            &schedule,
            cfg.inner_steps,
        )?;

        opt.begin_step();
        let updated: Vec<Tensor> = params
            .tensors()
            .iter()
            .zip(&grad.theta)
            .enumerate()
            .map(|(slot, (p, g))| opt.update_tensor(slot, p, g, true))
            .collect();
        params = ModelParams::from_tensors(updated)?;
        if cfg.lslr {
            opt.update_slice(rate_slot, lslr.values_mut(), &grad.rates, false);
        }

        let last = step == cfg.outer_steps;
        if step % cfg.val_interval == 0 || last {
            check(step, &params, &lslr, Some(grad.loss), &mut log)?;
        } else {
            log.push(MetaLogEntry {
                step,
                train_loss: Some(grad.loss),
                val_loss: None,
                best: false,
            });
        }
    }

    let (params, lslr, best_step, best_val_loss) = best;
    Ok(MetaTrainOutcome {
        params,
        lslr,
        best_step,
        best_val_loss,
        log,
    })
}
