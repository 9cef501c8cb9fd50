//! Seen/unseen partitions by annotator (and, for unseen, by session).

use std::collections::HashSet;

use super::{AnnotatorTask, Sample};
use crate::error::{contract, PerserError, Result};

const TEST_SESSION: u8 = 5;

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<AnnotatorTask>,
    pub val: AnnotatorTask,
    pub test: AnnotatorTask,
}

fn pick(tasks: &[AnnotatorTask], test: &str, val: &str) -> Result<(usize, usize)> {
    if test == val {
        return contract(format!("test and validation annotator are both `{test}`"));
    }
    let find = |id: &str| {
        tasks
            .iter()
            .position(|t| t.annotator_id == id)
            .ok_or_else(|| PerserError::UnknownAnnotator(id.to_string()))
    };
    Ok((find(test)?, find(val)?))
}

fn restrict(task: &AnnotatorTask, keep: impl Fn(&Sample) -> bool) -> AnnotatorTask {
    AnnotatorTask {
        annotator_id: task.annotator_id.clone(),
        samples: task.samples.iter().filter(|s| keep(s)).cloned().collect(),
    }
}

/// Test annotator's full task held out, validation annotator's full task for
/// model selection, everyone else trains. Utterances may recur across parts;
/// the held-out annotators' labels never do.
pub fn split_seen(tasks: &[AnnotatorTask], test: &str, val: &str) -> Result<DataSplit> {
    let (ti, vi) = pick(tasks, test, val)?;
    Ok(DataSplit {
        train: tasks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ti && *i != vi)
            .map(|(_, t)| t.clone())
            .collect(),
        val: tasks[vi].clone(),
        test: tasks[ti].clone(),
    })
}

/// Sessions 1–4 for training and validation, session 5 of the test annotator
/// for testing. Any utterance id that also occurs in the test part is
/// removed from training, so the two never share audio.
pub fn split_unseen(tasks: &[AnnotatorTask], test: &str, val: &str) -> Result<DataSplit> {
    let (ti, vi) = pick(tasks, test, val)?;
    let test_task = restrict(&tasks[ti], |s| s.session == TEST_SESSION);
    let test_ids: HashSet<&str> = test_task.samples.iter().map(|s| s.utt_id.as_str()).collect();
    let train_filter = |s: &Sample| s.session != TEST_SESSION && !test_ids.contains(s.utt_id.as_str());
    let train: Vec<AnnotatorTask> = tasks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ti && *i != vi)
        .map(|(_, t)| restrict(t, train_filter))
        .collect();
    let val_task = restrict(&tasks[vi], train_filter);

    let leaked = train
        .iter()
        .flat_map(|t| &t.samples)
        .any(|s| test_ids.contains(s.utt_id.as_str()));
    if leaked {
        return contract("unseen split leaked test utterances into training");
    }
    Ok(DataSplit {
        train,
        val: val_task,
        test: test_task,
    })
}
