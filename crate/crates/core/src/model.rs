//! The downstream emotion head: softmax-mixed layer features, mean pooling
//! over frames, two linear layers with a ReLU between them, and a softmax
//! output. Also the class-balanced soft-target cross-entropy and the
//! `1/C` multi-label threshold.

use autodiff::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, PerserError, Result};

/// Names of the stored tensors, in their fixed order.
pub const TENSOR_NAMES: [&str; 5] = [
    "layer_weights",
    "linear1.weight",
    "linear1.bias",
    "linear2.weight",
    "linear2.bias",
];

/// Named layers that per-layer learning rates are indexed by.
pub const LAYER_NAMES: [&str; 3] = ["layer_weights", "linear1", "linear2"];

/// Which named layer each tensor in [`TENSOR_NAMES`] belongs to.
pub const TENSOR_LAYER: [usize; 5] = [0, 1, 1, 2, 2];

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_BETA: f64 = 0.999;

/// A layered feature block (layers × frames × dim) for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub utt_id: String,
    values: Tensor,
}

impl EmbeddingSequence {
    pub fn new(utt_id: impl Into<String>, values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(PerserError::Shape(format!(
                "embedding sequence must be layers × frames × dim with non-zero extents, got {shape:?}"
            )));
        }
        if !values.is_finite() {
            return contract("embedding values must be finite");
        }
        Ok(Self {
            utt_id: utt_id.into(),
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Mean over frames, one row per layer.
    pub fn pooled(&self) -> Tensor {
        self.values
            .sum_axis(1)
            .expect("rank checked at construction")
            .scale(1.0 / self.frames() as f64)
    }
}

/// Multi-hot emotion labels with at least one positive class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet(Vec<bool>);

impl LabelSet {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&f| f) {
            return contract("a label set needs at least one positive class");
        }
        Ok(Self(flags))
    }

    pub fn from_indices(classes: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; classes];
        for &i in indices {
            if i >= classes {
                return contract(format!("class index {i} out of range for {classes} classes"));
            }
            flags[i] = true;
        }
        Self::new(flags)
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    /// The labels as a distribution: uniform over the positive classes.
    pub fn soft_target(&self) -> Vec<f64> {
        let k = self.count() as f64;
        self.0.iter().map(|&f| if f { 1.0 / k } else { 0.0 }).collect()
    }
}

/// Class-balanced weights from effective numbers of samples:
/// `w_c ∝ (1 − β) / (1 − β^{n_c})`, scaled to sum to the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalanceWeights {
    pub beta: f64,
    pub counts: Vec<usize>,
    weights: Vec<f64>,
}

impl ClassBalanceWeights {
    /// Classes with zero observed samples are treated as having one, which
    /// keeps their weight finite.
    pub fn from_counts(beta: f64, counts: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return contract(format!("class-balance beta must be in [0, 1), got {beta}"));
        }
        if counts.is_empty() {
            return contract("class-balance weights need at least one class");
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| {
                let n = n.max(1) as f64;
                // 1 − β^n, accurate for β close to 1.
                let denom = if beta == 0.0 { 1.0 } else { -(n * beta.ln()).exp_m1() };
                (1.0 - beta) / denom
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let scale = counts.len() as f64 / total;
        Ok(Self {
            beta,
            counts: counts.to_vec(),
            weights: raw.iter().map(|w| w * scale).collect(),
        })
    }

    /// Counts every positive label occurrence.
    pub fn from_labels<'a>(beta: f64, classes: usize, labels: impl IntoIterator<Item = &'a LabelSet>) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for set in labels {
            for c in set.indices() {
                counts[c] += 1;
            }
        }
        Self::from_counts(beta, &counts)
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            beta: 0.0,
            counts: vec![1; classes],
            weights: vec![1.0; classes],
        }
    }

    /// Rebuilds weights from stored values (as read from a checkpoint).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return contract("class weights must be finite and positive");
        }
        Ok(Self {
            beta: f64::NAN,
            counts: Vec::new(),
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub layers: usize,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Parameters of the emotion head. Tensors are immutable; adaptation
/// always produces a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: [Tensor; 5],
}

impl ModelParams {
    pub fn zeros(dims: HeadDims) -> Self {
        let HeadDims { layers, dim, hidden, classes } = dims;
        Self {
            tensors: [
                Tensor::zeros(&[layers]),
                Tensor::zeros(&[dim, hidden]),
                Tensor::zeros(&[hidden]),
                Tensor::zeros(&[hidden, classes]),
                Tensor::zeros(&[classes]),
            ],
        }
    }

    /// Uniform fan-in initialization for the linear layers; layer-mixing
    /// logits start at zero (equal weighting).
    pub fn init_random(dims: HeadDims, rng: &mut impl Rng) -> Self {
        let HeadDims { layers, dim, hidden, classes } = dims;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("length matches shape")
        };
        let w1 = uniform(&[dim, hidden], dim);
        let b1 = uniform(&[hidden], dim);
        let w2 = uniform(&[hidden, classes], hidden);
        let b2 = uniform(&[classes], hidden);
        Self {
            tensors: [Tensor::zeros(&[layers]), w1, b1, w2, b2],
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let tensors: [Tensor; 5] = tensors
            .try_into()
            .map_err(|v: Vec<Tensor>| PerserError::Shape(format!("expected 5 parameter tensors, got {}", v.len())))?;
        let [lw, w1, b1, w2, b2] = &tensors;
        let ok = lw.rank() == 1
            && w1.rank() == 2
            && b1.shape() == [w1.shape()[1]]
            && w2.rank() == 2
            && w2.shape()[0] == w1.shape()[1]
            && b2.shape() == [w2.shape()[1]];
        if !ok {
            let shapes: Vec<_> = tensors.iter().map(|t| t.shape().to_vec()).collect();
            return Err(PerserError::Shape(format!("inconsistent head parameter shapes {shapes:?}")));
        }
        Ok(Self { tensors })
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            layers: self.tensors[0].shape()[0],
            dim: self.tensors[1].shape()[0],
            hidden: self.tensors[1].shape()[1],
            classes: self.tensors[4].shape()[0],
        }
    }

    pub fn tensors(&self) -> &[Tensor; 5] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors.into()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }

    /// Fresh differentiable leaves for every tensor.
    pub fn leaves(&self) -> Vec<Var> {
        self.tensors.iter().cloned().map(Var::param).collect()
    }

    pub fn constants(&self) -> Vec<Var> {
        self.tensors.iter().cloned().map(Var::constant).collect()
    }
}

/// Pooled inputs and soft targets for a set of labelled samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pooled: Tensor,
    targets: Option<Tensor>,
}

impl Batch {
    pub fn inputs<'a>(seqs: impl IntoIterator<Item = &'a EmbeddingSequence>) -> Result<Self> {
        let mut data = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        let mut count = 0;
        for seq in seqs {
            let dims = (seq.layers(), seq.dim());
            match shape {
                None => shape = Some(dims),
                Some(s) if s != dims => {
                    return Err(PerserError::Shape(format!(
                        "utterance {} has layers × dim {:?}, batch has {:?}",
                        seq.utt_id, dims, s
                    )))
                }
                Some(_) => {}
            }
            data.extend_from_slice(seq.pooled().data());
            count += 1;
        }
        let Some((layers, dim)) = shape else {
            return contract("batch must be non-empty");
        };
        Ok(Self {
            pooled: Tensor::new(&[count, layers, dim], data)?,
            targets: None,
        })
    }

    pub fn labelled<'a>(samples: impl IntoIterator<Item = (&'a EmbeddingSequence, &'a LabelSet)>) -> Result<Self> {
        let (seqs, labels): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        let mut batch = Self::inputs(seqs)?;
        let classes = labels[0].classes();
        if labels.iter().any(|l| l.classes() != classes) {
            return Err(PerserError::Shape("label sets disagree on class count".into()));
        }
        let targets: Vec<f64> = labels.iter().flat_map(|l| l.soft_target()).collect();
        batch.targets = Some(Tensor::new(&[labels.len(), classes], targets)?);
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }

    pub fn targets(&self) -> Option<&Tensor> {
        self.targets.as_ref()
    }

    fn check_dims(&self, dims: HeadDims) -> Result<()> {
        let s = self.pooled.shape();
        if s[1] != dims.layers || s[2] != dims.dim {
            return Err(PerserError::Shape(format!(
                "inputs have {} layers × {} dims, head expects {} × {}",
                s[1], s[2], dims.layers, dims.dim
            )));
        }
        Ok(())
    }

    /// Binds class weights, producing a differentiable objective.
    pub fn with_weights(&self, weights: &ClassBalanceWeights) -> Result<WeightedBatch> {
        let Some(targets) = &self.targets else {
            return contract("loss needs labelled samples");
        };
        let (n, classes) = (targets.shape()[0], targets.shape()[1]);
        if weights.classes() != classes {
            return Err(PerserError::Shape(format!(
                "{} class weights for {classes} classes",
                weights.classes()
            )));
        }
        let w = weights.weights();
        let coef: Vec<f64> = targets
            .data()
            .chunks(classes)
            .flat_map(|row| row.iter().zip(w).map(|(t, wc)| wc * t / n as f64))
            .collect();
        Ok(WeightedBatch {
            pooled: self.pooled.clone(),
            coef: Tensor::new(&[n, classes], coef)?,
        })
    }
}

/// A differentiable scalar function of a parameter list.
pub trait Objective {
    fn loss(&self, params: &[Var]) -> Result<Var>;
}

/// A labelled batch with class weights folded into the targets.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pooled: Tensor,
    coef: Tensor,
}

impl WeightedBatch {
    pub fn len(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Objective for WeightedBatch {
    fn loss(&self, params: &[Var]) -> Result<Var> {
        let logits = forward_logits(params, &Var::constant(self.pooled.clone()))?;
        let logp = logits.log_softmax()?;
        Ok(logp.mul(&Var::constant(self.coef.clone()))?.sum().neg())
    }
}

fn param_dims(params: &[Var]) -> Result<HeadDims> {
    if params.len() != 5 {
        return Err(PerserError::Shape(format!("expected 5 parameter tensors, got {}", params.len())));
    }
    let w1 = params[1].shape();
    let w2 = params[3].shape();
    if w1.len() != 2 || w2.len() != 2 {
        return Err(PerserError::Shape("linear weights must be matrices".into()));
    }
    Ok(HeadDims {
        layers: params[0].shape()[0],
        dim: w1[0],
        hidden: w1[1],
        classes: w2[1],
    })
}

/// Layer-mixed, frame-pooled features (batch × dim).
pub fn mixed_features(params: &[Var], pooled: &Var) -> Result<Var> {
    let mix = params[0].softmax()?;
    Ok(pooled.weighted_sum_axis(&mix, 1)?)
}

/// Pre-softmax class scores (batch × classes).
pub fn forward_logits(params: &[Var], pooled: &Var) -> Result<Var> {
    let dims = param_dims(params)?;
    let n = pooled.shape()[0];
    if pooled.shape()[1..] != [dims.layers, dims.dim] {
        return Err(PerserError::Shape(format!(
            "inputs {:?} incompatible with head {:?}",
            pooled.shape(),
            dims
        )));
    }
    let features = mixed_features(params, pooled)?;
    let hidden = features
        .matmul(&params[1])?
        .add(&params[2].expand_axis(0, n)?)?
        .relu();
    Ok(hidden.matmul(&params[3])?.add(&params[4].expand_axis(0, n)?)?)
}

/// Class probabilities for every sample in `batch` (batch × classes).
pub fn predict_batch(params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    batch.check_dims(params.dims())?;
    let logits = forward_logits(&params.constants(), &Var::constant(batch.pooled.clone()))?;
    Ok(logits.value().softmax()?)
}

/// Class probabilities for one utterance.
pub fn predict(params: &ModelParams, x: &EmbeddingSequence) -> Result<Vec<f64>> {
    let batch = Batch::inputs([x])?;
    Ok(predict_batch(params, &batch)?.to_vec())
}

/// The pooled, layer-mixed representation fed to the first linear layer.
pub fn features(params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    batch.check_dims(params.dims())?;
    Ok(mixed_features(&params.constants(), &Var::constant(batch.pooled.clone()))?
        .value()
        .clone())
}

/// Mean class-balanced soft-target cross-entropy over `batch`.
pub fn loss(params: &ModelParams, batch: &Batch, weights: &ClassBalanceWeights) -> Result<f64> {
    if batch.targets.is_none() {
        return contract("loss needs labelled samples");
    }
    batch.check_dims(params.dims())?;
    let objective = batch.with_weights(weights)?;
    Ok(objective.loss(&params.constants())?.value().item()?)
}

/// Marks class `c` positive iff `p[c] ≥ 1/C`.
///
/// For any point on the simplex the largest entry clears the threshold; if
/// rounding in a caller-supplied vector ever defeats that, the arg-max class
/// is marked instead so the result is never empty.
pub fn threshold_predictions(p: &[f64]) -> LabelSet {
    let threshold = 1.0 / p.len() as f64;
    let mut flags: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
    if !flags.iter().any(|&f| f) {
        let best = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        flags[best] = true;
    }
    LabelSet(flags)
}
