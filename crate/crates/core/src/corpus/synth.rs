//! Synthetic annotator tasks.
//!
//! Every utterance has a latent emotion drawn from a shared distribution and
//! an embedding drawn from that emotion's Gaussian. Each annotator relabels
//! the latent emotion through its own confusion matrix. Presets built from
//! per-annotator label distributions use the maximal-agreement coupling
//! between the latent distribution and the annotator's marginal, so each
//! annotator reproduces its target label frequencies while agreeing with the
//! latent emotion as often as those frequencies allow.

use std::collections::BTreeMap;

use autodiff::Tensor;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{build_tasks, AnnotationRecord, AnnotatorTask, EmbeddingStore, EMOTIONS};
use crate::error::{contract, Result};
use crate::model::{EmbeddingSequence, LabelSet};

const CLASSES: usize = EMOTIONS.len();

/// Seen-scenario evaluation annotators: label distribution in percent, in
/// [`EMOTIONS`] order.
const SEEN_ROWS: [(&str, [f64; CLASSES]); 5] = [
    ("C-E1", [38.16, 13.21, 12.73, 0.13, 24.07, 1.68, 5.02, 0.20, 4.79]),
    ("C-E2", [12.12, 22.83, 17.53, 0.38, 7.01, 0.45, 17.35, 2.85, 19.48]),
    ("C-E4", [24.66, 9.57, 8.98, 0.08, 11.53, 0.48, 36.78, 1.679, 6.24]),
    ("C-E5", [16.45, 11.46, 4.07, 5.73, 0.55, 6.10, 48.43, 1.48, 5.73]),
    ("C-E6", [30.61, 9.87, 9.37, 1.01, 16.21, 1.51, 13.09, 4.43, 13.90]),
];

/// Unseen-scenario (session 5) evaluation annotators.
const UNSEEN_ROWS: [(&str, [f64; CLASSES]); 5] = [
    ("C-E1", [40.13, 10.33, 14.72, 0.12, 22.06, 1.62, 5.43, 0.23, 5.37]),
    ("C-E2", [12.44, 21.43, 17.18, 0.37, 7.51, 0.43, 17.92, 2.83, 19.89]),
    ("C-E4", [26.65, 6.85, 9.33, 0.06, 13.71, 1.52, 35.28, 1.14, 5.46]),
    ("C-E5", [8.16, 6.12, 13.27, 9.18, 2.04, 27.55, 33.67, 0.00, 0.00]),
    ("C-E6", [14.48, 3.45, 0.00, 0.00, 37.93, 0.00, 22.76, 2.76, 18.62]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorProfile {
    pub name: String,
    /// Target label distribution (fractions summing to 1).
    pub distribution: Vec<f64>,
    /// Row `z` is the distribution of emitted labels given latent emotion `z`.
    pub confusion: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPreset {
    pub name: String,
    /// Distribution of latent emotions over utterances.
    pub latent: Vec<f64>,
    pub annotators: Vec<AnnotatorProfile>,
    /// Distance between class means, in within-class standard deviations.
    pub separation: f64,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    /// Probability that an annotation carries a second label.
    pub second_label_prob: f64,
    /// Average number of annotators per utterance; sizes the utterance pool.
    pub raters_per_utterance: usize,
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    row.iter().map(|v| v / total).collect()
}

fn identity_rows() -> Vec<Vec<f64>> {
    (0..CLASSES)
        .map(|z| (0..CLASSES).map(|e| if e == z { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Confusion matrix `M` with `latent · M = target` that keeps the diagonal
/// as large as possible; surplus latent mass is spread over the target's
/// deficit classes in proportion to their deficits.
pub fn maximal_agreement_confusion(latent: &[f64], target: &[f64]) -> Vec<Vec<f64>> {
    let common: Vec<f64> = latent.iter().zip(target).map(|(a, b)| a.min(*b)).collect();
    let deficit: Vec<f64> = target.iter().zip(&common).map(|(t, c)| t - c).collect();
    let total_deficit: f64 = deficit.iter().sum();
    (0..latent.len())
        .map(|z| {
            if latent[z] <= 0.0 {
                return (0..latent.len()).map(|e| if e == z { 1.0 } else { 0.0 }).collect();
            }
            let surplus = (latent[z] - common[z]) / latent[z];
            (0..latent.len())
                .map(|e| {
                    let moved = if total_deficit > 0.0 {
                        surplus * deficit[e] / total_deficit
                    } else {
                        0.0
                    };
                    let kept = if e == z { common[z] / latent[z] } else { 0.0 };
                    kept + moved
                })
                .collect()
        })
        .collect()
}

impl SynthPreset {
    fn base(name: &str, latent: Vec<f64>, annotators: Vec<AnnotatorProfile>) -> Self {
        Self {
            name: name.into(),
            latent,
            annotators,
            separation: 2.0,
            layers: 2,
            frames: 8,
            dim: 32,
            second_label_prob: 0.05,
            raters_per_utterance: 3,
        }
    }

    /// Ten annotators whose label distributions follow the per-annotator
    /// distribution tables (seen rows, then unseen rows); the latent
    /// distribution is their average.
    pub fn iemocap_ext() -> Self {
        let rows: Vec<(String, Vec<f64>)> = SEEN_ROWS
            .iter()
            .map(|(n, r)| (format!("{n}-seen"), normalized(r)))
            .chain(UNSEEN_ROWS.iter().map(|(n, r)| (format!("{n}-unseen"), normalized(r))))
            .collect();
        let latent = normalized(
            &(0..CLASSES)
                .map(|c| rows.iter().map(|(_, r)| r[c]).sum::<f64>())
                .collect::<Vec<_>>(),
        );
        let annotators = rows
            .into_iter()
            .map(|(name, distribution)| AnnotatorProfile {
                confusion: maximal_agreement_confusion(&latent, &distribution),
                name,
                distribution,
            })
            .collect();
        Self::base("iemocap-ext", latent, annotators)
    }

    /// Annotators that all report the latent emotion.
    pub fn identity(annotators: usize) -> Self {
        let latent = vec![1.0 / CLASSES as f64; CLASSES];
        let profiles = (0..annotators)
            .map(|i| AnnotatorProfile {
                name: format!("A{:02}", i + 1),
                distribution: latent.clone(),
                confusion: identity_rows(),
            })
            .collect();
        Self::base("identity", latent, profiles)
    }

    /// Like [`SynthPreset::identity`], except the last annotator reports
    /// latent class `c` as class `(c + 1) mod 9`.
    pub fn permuted(annotators: usize) -> Self {
        let mut preset = Self::identity(annotators);
        preset.name = "permuted".into();
        if let Some(last) = preset.annotators.last_mut() {
            last.confusion = (0..CLASSES)
                .map(|z| (0..CLASSES).map(|e| if e == (z + 1) % CLASSES { 1.0 } else { 0.0 }).collect())
                .collect();
        }
        preset
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "iemocap-ext" => Some(Self::iemocap_ext()),
            "identity" => Some(Self::identity(10)),
            "permuted" => Some(Self::permuted(10)),
            _ => None,
        }
    }

    /// A preset with only the named annotator profile.
    pub fn single(&self, annotator: &str) -> Option<Self> {
        let profile = self.annotators.iter().find(|a| a.name == annotator)?.clone();
        Some(Self {
            annotators: vec![profile],
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let near_one = |v: f64| (v - 1.0).abs() < 1e-6;
        if self.latent.len() != CLASSES || !near_one(self.latent.iter().sum()) {
            return contract(format!("preset {}: latent distribution must have {CLASSES} entries summing to 1", self.name));
        }
        if self.annotators.is_empty() {
            return contract(format!("preset {} has no annotators", self.name));
        }
        for a in &self.annotators {
            if a.distribution.len() != CLASSES || !near_one(a.distribution.iter().sum()) {
                return contract(format!("annotator {}: distribution must sum to 1", a.name));
            }
            if a.confusion.len() != CLASSES {
                return contract(format!("annotator {}: confusion needs {CLASSES} rows", a.name));
            }
            for (z, row) in a.confusion.iter().enumerate() {
                if row.len() != CLASSES || row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return contract(format!("annotator {}: confusion row {z} is malformed", a.name));
                }
                if row.iter().all(|&v| v == 0.0) {
                    return contract(format!("annotator {}: confusion row {z} is all zeros", a.name));
                }
                if !near_one(row.iter().sum()) {
                    return contract(format!("annotator {}: confusion row {z} does not sum to 1", a.name));
                }
            }
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return contract("separation must be a non-negative real");
        }
        if self.layers == 0 || self.frames == 0 || self.dim == 0 || self.raters_per_utterance == 0 {
            return contract("layers, frames, dim and raters per utterance must be positive");
        }
        if !(0.0..=1.0).contains(&self.second_label_prob) {
            return contract("second-label probability must be in [0, 1]");
        }
        Ok(())
    }
}

/// A generated corpus: annotation records, their embeddings, and the latent
/// emotion of every utterance.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<AnnotationRecord>,
    pub store: EmbeddingStore,
    pub latent: BTreeMap<String, usize>,
}

impl SynthCorpus {
    pub fn tasks(&self) -> Result<Vec<AnnotatorTask>> {
        build_tasks(&self.records, &self.store)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates `annotators` tasks of `samples` annotations each. A pure
/// function of its arguments.
pub fn generate_synthetic(preset: &SynthPreset, annotators: usize, samples: usize, seed: u64) -> Result<SynthCorpus> {
    preset.validate()?;
    if annotators == 0 || samples == 0 {
        return contract("need at least one annotator and one sample");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layers, frames, dim) = (preset.layers, preset.frames, preset.dim);

    // Class means at pairwise distance ≈ separation (near-orthogonal directions).
    let radius = preset.separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| radius * x / norm).collect()
        })
        .collect();
    let gains: Vec<f64> = (0..layers).map(|l| (l + 1) as f64 / layers as f64).collect();

    let pool = samples.max((annotators * samples).div_ceil(preset.raters_per_utterance));
    let latent_dist = WeightedIndex::new(&preset.latent).map_err(|e| crate::PerserError::Contract(e.to_string()))?;
    let mut store = EmbeddingStore::new();
    let mut latent = BTreeMap::new();
    let mut utterances = Vec::with_capacity(pool);
    for i in 0..pool {
        let z = latent_dist.sample(&mut rng);
        let utt_id = format!("syn{i:05}");
        let session = (1 + i * 5 / pool) as u8;
        let mut values = Vec::with_capacity(layers * frames * dim);
        for &gain in &gains {
            let offset: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            for _ in 0..frames {
                for d in 0..dim {
                    let v = gain * means[z][d] + offset[d] + gaussian(&mut rng);
                    // Stored as f32 on disk; keep memory and disk identical.
                    values.push(v as f32 as f64);
                }
            }
        }
        let tensor = Tensor::new(&[layers, frames, dim], values)?;
        store.insert(EmbeddingSequence::new(utt_id.clone(), tensor)?);
        latent.insert(utt_id.clone(), z);
        utterances.push((utt_id, session, z));
    }

    let rows: Vec<Vec<WeightedIndex<f64>>> = preset
        .annotators
        .iter()
        .map(|a| {
            a.confusion
                .iter()
                .map(|row| WeightedIndex::new(row).expect("validated row"))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(annotators * samples);
    for a in 0..annotators {
        let profile = a % preset.annotators.len();
        let cycle = a / preset.annotators.len();
        let name = &preset.annotators[profile].name;
        let annotator_id = if cycle == 0 { name.clone() } else { format!("{name}.{cycle}") };
        let mut chosen = index::sample(&mut rng, pool, samples).into_vec();
        chosen.sort_unstable();
        for u in chosen {
            let (utt_id, session, z) = &utterances[u];
            let first = rows[profile][*z].sample(&mut rng);
            let mut labels = vec![first];
            if rng.random::<f64>() < preset.second_label_prob {
                let second = rows[profile][*z].sample(&mut rng);
                if second != first {
                    labels.push(second);
                }
            }
            records.push(AnnotationRecord {
                utt_id: utt_id.clone(),
                annotator_id: annotator_id.clone(),
                session: *session,
                labels: LabelSet::from_indices(CLASSES, &labels)?,
            });
        }
    }
    Ok(SynthCorpus { records, store, latent })
}
