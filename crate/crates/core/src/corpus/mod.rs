//! Annotated utterances grouped into per-annotator tasks, the seen/unseen
//! split protocols, few-shot episode sampling and a synthetic task generator.

mod manifest;
mod split;
mod store;
mod synth;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use manifest::{load_manifest, read_manifest, write_manifest};
pub use split::{split_seen, split_unseen, DataSplit};
pub use store::{read_embedding, write_embedding, EmbeddingStore, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use synth::{generate_synthetic, AnnotatorProfile, SynthCorpus, SynthPreset};

use crate::error::{contract, PerserError, Result};
use crate::model::{Batch, EmbeddingSequence, LabelSet};

/// The fixed emotion vocabulary; position is the class index.
pub const EMOTIONS: [&str; 9] = [
    "frustrated",
    "angry",
    "sad",
    "disgust",
    "excited",
    "fear",
    "neutral",
    "surprise",
    "happy",
];

pub fn emotion_index(name: &str) -> Option<usize> {
    EMOTIONS.iter().position(|e| *e == name)
}

/// One annotator's judgment of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub utt_id: String,
    pub annotator_id: String,
    pub session: u8,
    pub labels: LabelSet,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.session) {
            return contract(format!("session {} outside 1..=5", self.session));
        }
        if self.labels.classes() != EMOTIONS.len() {
            return contract(format!("labels cover {} classes, expected {}", self.labels.classes(), EMOTIONS.len()));
        }
        Ok(())
    }
}

/// A labelled utterance inside a task.
#[derive(Debug, Clone)]
pub struct Sample {
    pub utt_id: String,
    pub session: u8,
    pub embedding: Arc<EmbeddingSequence>,
    pub labels: LabelSet,
}

/// All annotations of one annotator.
#[derive(Debug, Clone)]
pub struct AnnotatorTask {
    pub annotator_id: String,
    pub samples: Vec<Sample>,
}

impl AnnotatorTask {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Joins annotation records to embeddings, one task per annotator, ordered by
/// annotator id. Records keep their input order within a task.
pub fn build_tasks(records: &[AnnotationRecord], store: &EmbeddingStore) -> Result<Vec<AnnotatorTask>> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| store.get(&r.utt_id).is_none())
        .map(|r| r.utt_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(PerserError::MissingEmbeddings(missing));
    }
    let mut tasks: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        tasks.entry(r.annotator_id.clone()).or_default().push(Sample {
            utt_id: r.utt_id.clone(),
            session: r.session,
            embedding: store.get(&r.utt_id).expect("checked above"),
            labels: r.labels.clone(),
        });
    }
    Ok(tasks
        .into_iter()
        .map(|(annotator_id, samples)| AnnotatorTask { annotator_id, samples })
        .collect())
}

/// Drops annotators with fewer than `min_records` samples, logging each one.
pub fn exclude_sparse(tasks: Vec<AnnotatorTask>, min_records: usize) -> Vec<AnnotatorTask> {
    tasks
        .into_iter()
        .filter(|t| {
            let keep = t.len() >= min_records;
            if !keep {
                log::warn!(
                    "excluding annotator {}: {} records, threshold {}",
                    t.annotator_id,
                    t.len(),
                    min_records
                );
            }
            keep
        })
        .collect()
}

/// K adaptation samples and Q disjoint evaluation samples from one annotator.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub annotator_id: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl FewShotSplit {
    pub fn train_batch(&self) -> Result<Batch> {
        samples_batch(&self.train)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        samples_batch(&self.test)
    }
}

pub fn samples_batch(samples: &[Sample]) -> Result<Batch> {
    Batch::labelled(samples.iter().map(|s| (s.embedding.as_ref(), &s.labels)))
}

/// Uniformly samples K + Q distinct records; the first K train, the rest test.
pub fn sample_episode(task: &AnnotatorTask, shots: usize, queries: usize, seed: u64) -> Result<FewShotSplit> {
    let needed = shots + queries;
    if task.len() < needed {
        return Err(PerserError::InsufficientData {
            annotator: task.annotator_id.clone(),
            available: task.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, task.len(), needed).into_vec();
    let take = |idx: &[usize]| idx.iter().map(|&i| task.samples[i].clone()).collect::<Vec<_>>();
    Ok(FewShotSplit {
        annotator_id: task.annotator_id.clone(),
        train: take(&picked[..shots]),
        test: take(&picked[shots..]),
        seed,
    })
}

/// Labels of every sample across the given tasks.
pub fn all_labels<'a>(tasks: impl IntoIterator<Item = &'a AnnotatorTask>) -> impl Iterator<Item = &'a LabelSet> {
    tasks.into_iter().flat_map(|t| t.samples.iter().map(|s| &s.labels))
}
