//! Scoring of probability outputs against gold label sets.

use autodiff::Tensor;

use crate::error::{PerserError, Result};
use crate::metrics::{score, Scores};
use crate::model::{predict_batch, threshold_predictions, Batch, LabelSet, ModelParams};

/// Thresholds each row of a batch × classes probability matrix.
pub fn predictions(probs: &Tensor) -> Result<Vec<LabelSet>> {
    let [_, classes] = probs.shape() else {
        return Err(PerserError::Shape(format!("probabilities must be a matrix, got {:?}", probs.shape())));
    };
    Ok(probs.data().chunks(*classes).map(threshold_predictions).collect())
}

/// Scores thresholded probabilities against `gold`.
pub fn score_probabilities<'a>(probs: &Tensor, gold: impl IntoIterator<Item = &'a LabelSet>) -> Result<Scores> {
    let gold: Vec<LabelSet> = gold.into_iter().cloned().collect();
    score(&predictions(probs)?, &gold)
}

/// Runs the head on `batch` and scores its thresholded outputs.
pub fn evaluate<'a>(params: &ModelParams, batch: &Batch, gold: impl IntoIterator<Item = &'a LabelSet>) -> Result<Scores> {
    score_probabilities(&predict_batch(params, batch)?, gold)
}
