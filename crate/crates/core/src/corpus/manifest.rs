//! Line-delimited JSON annotation manifests:
//! `{"utt_id": "...", "annotator_id": "...", "session": 1, "labels": ["angry", ...]}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_tasks, emotion_index, AnnotationRecord, AnnotatorTask, EmbeddingStore, EMOTIONS};
use crate::error::{PerserError, Result};
use crate::model::LabelSet;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    utt_id: String,
    annotator_id: String,
    session: u8,
    labels: Vec<String>,
}

fn parse_line(text: &str) -> std::result::Result<AnnotationRecord, String> {
    let line: ManifestLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if !(1..=5).contains(&line.session) {
        return Err(format!("session {} outside 1..=5", line.session));
    }
    let mut indices = Vec::with_capacity(line.labels.len());
    for name in &line.labels {
        let idx = emotion_index(name).ok_or_else(|| format!("unknown emotion `{name}` (vocabulary: {})", EMOTIONS.join(", ")))?;
        indices.push(idx);
    }
    let labels = LabelSet::from_indices(EMOTIONS.len(), &indices).map_err(|_| "record has no labels".to_string())?;
    Ok(AnnotationRecord {
        utt_id: line.utt_id,
        annotator_id: line.annotator_id,
        session: line.session,
        labels,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| PerserError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_line(l).map_err(|message| PerserError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| PerserError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = ManifestLine {
            utt_id: r.utt_id.clone(),
            annotator_id: r.annotator_id.clone(),
            session: r.session,
            labels: r.labels.indices().iter().map(|&i| EMOTIONS[i].to_string()).collect(),
        };
        let json = serde_json::to_string(&line).expect("manifest lines always serialize");
        writeln!(out, "{json}").map_err(|e| PerserError::io(path, e))?;
    }
    out.flush().map_err(|e| PerserError::io(path, e))
}

/// Reads a manifest and joins it against the embedding directory.
pub fn load_manifest(manifest: &Path, embeddings: &Path) -> Result<Vec<AnnotatorTask>> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let store = EmbeddingStore::open(embeddings)?;
    build_tasks(&records, &store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_multi_label_line() {
        let r = parse_line(r#"{"utt_id":"Ses01F_impro01_F000","annotator_id":"C-E1","session":1,"labels":["angry","sad"]}"#).unwrap();
        assert_eq!(r.labels.indices(), vec![1, 2]);
        assert_eq!(r.session, 1);
    }

    #[test]
    fn other_category_is_rejected() {
        let err = parse_line(r#"{"utt_id":"u","annotator_id":"a","session":1,"labels":["other"]}"#).unwrap_err();
        assert!(err.contains("unknown emotion `other`"));
    }

    #[test]
    fn misnamed_field_is_rejected() {
        assert!(parse_line(r#"{"utt":"u","annotator_id":"a","session":1,"labels":["sad"]}"#).is_err());
    }

    #[test]
    fn bad_session_and_empty_labels_are_rejected() {
        assert!(parse_line(r#"{"utt_id":"u","annotator_id":"a","session":6,"labels":["sad"]}"#).is_err());
        assert!(parse_line(r#"{"utt_id":"u","annotator_id":"a","session":2,"labels":[]}"#).is_err());
    }
}
