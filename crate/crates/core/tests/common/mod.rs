//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls into the library's forward pass or metrics.

#![allow(dead_code)]

use std::sync::Arc;

use autodiff::Tensor;
use perser::corpus::Sample;
use perser::model::{ClassBalanceWeights, EmbeddingSequence, HeadDims, LabelSet, ModelParams};
use rand::Rng;

pub fn uniform_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Every tensor random, including the mixing logits and biases.
pub fn random_head(dims: HeadDims, rng: &mut impl Rng) -> ModelParams {
    let HeadDims { layers, dim, hidden, classes } = dims;
    ModelParams::from_tensors(vec![
        uniform_tensor(&[layers], 1.0, rng),
        uniform_tensor(&[dim, hidden], 0.8, rng),
        uniform_tensor(&[hidden], 0.5, rng),
        uniform_tensor(&[hidden, classes], 0.8, rng),
        uniform_tensor(&[classes], 0.5, rng),
    ])
    .unwrap()
}

pub fn random_labels(classes: usize, rng: &mut impl Rng) -> LabelSet {
    let first = rng.random_range(0..classes);
    let mut idx = vec![first];
    if rng.random::<f64>() < 0.3 {
        idx.push(rng.random_range(0..classes));
    }
    LabelSet::from_indices(classes, &idx).unwrap()
}

pub fn random_samples(n: usize, layers: usize, frames: usize, dim: usize, classes: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let id = format!("u{i}");
            let values = uniform_tensor(&[layers, frames, dim], 1.5, rng);
            Sample {
                utt_id: id.clone(),
                session: 1,
                embedding: Arc::new(EmbeddingSequence::new(id, values).unwrap()),
                labels: random_labels(classes, rng),
            }
        })
        .collect()
}

/// Straight-line forward pass with explicit loops.
pub fn reference_predict(params: &ModelParams, x: &EmbeddingSequence) -> Vec<f64> {
    let t = params.tensors();
    let (lw, w1, b1, w2, b2) = (t[0].data(), t[1].data(), t[2].data(), t[3].data(), t[4].data());
    let (layers, frames, dim) = (x.layers(), x.frames(), x.dim());
    let hidden = b1.len();
    let classes = b2.len();
    let v = x.values().data();

    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = lw.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mix: Vec<f64> = e.iter().map(|a| a / z).collect();

    let mut feat = vec![0.0; dim];
    for l in 0..layers {
        for d in 0..dim {
            let mut s = 0.0;
            for f in 0..frames {
                s += v[(l * frames + f) * dim + d];
            }
            feat[d] += mix[l] * (s / frames as f64);
        }
    }
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut s = b1[j];
        for d in 0..dim {
            s += feat[d] * w1[d * hidden + j];
        }
        h[j] = s.max(0.0);
    }
    let mut logits = vec![0.0; classes];
    for c in 0..classes {
        let mut s = b2[c];
        for j in 0..hidden {
            s += h[j] * w2[j * classes + c];
        }
        logits[c] = s;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|a| a / z).collect()
}

/// Mean over samples of −Σ w_c t_c log p_c with normalized multi-hot targets.
pub fn reference_loss(params: &ModelParams, samples: &[Sample], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let p = reference_predict(params, &s.embedding);
        let k = s.labels.count() as f64;
        for c in s.labels.indices() {
            total -= weights[c] * (1.0 / k) * p[c].ln();
        }
    }
    total / samples.len() as f64
}

/// Class-balanced weights from the defining formula, one class at a time.
pub fn reference_weights(beta: f64, counts: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n.max(1) as i32)))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w * counts.len() as f64 / s).collect()
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn fd_gradient(f: impl Fn(&[Tensor]) -> f64, at: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let mut g = Vec::with_capacity(at[i].len());
        for j in 0..at[i].len() {
            let shift = |delta: f64| {
                let mut moved = at.to_vec();
                let mut vals = moved[i].to_vec();
                vals[j] += delta;
                moved[i] = Tensor::new(at[i].shape(), vals).unwrap();
                f(&moved)
            };
            g.push((shift(h) - shift(-h)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or ‖a − b‖ when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Per-class counting with explicit loops; returns (maF1, miF1, UA).
pub fn brute_force_scores(preds: &[Vec<bool>], gold: &[Vec<bool>]) -> (f64, f64, f64) {
    let classes = gold[0].len();
    let n = gold.len();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let mut f1s = Vec::new();
    let mut accs = Vec::new();
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            match (preds[i][c], gold[i][c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        if tp + fp + fn_ > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
        accs.push((tp + tn) as f64 / n as f64);
    }
    let ma = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    let denom = 2 * tp_all + fp_all + fn_all;
    let mi = if denom == 0 { 0.0 } else { 2.0 * tp_all as f64 / denom as f64 };
    (ma, mi, accs.iter().sum::<f64>() / classes as f64)
}

/// Weights for a batch, uniform over classes.
pub fn uniform(classes: usize) -> ClassBalanceWeights {
    ClassBalanceWeights::uniform(classes)
}
