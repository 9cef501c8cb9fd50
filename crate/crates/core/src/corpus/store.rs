//! Embedding files: `MPSE` magic, u16 version, u32 layers/frames/dim
//! (little-endian), then `layers·frames·dim` little-endian f32 values in
//! (layer, frame, dim) order. One file per utterance, named `<utt_id>.mpse`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autodiff::Tensor;

use crate::error::{PerserError, Result};
use crate::model::EmbeddingSequence;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MPSE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;
const EXTENSION: &str = "mpse";

fn bad(path: &Path, message: impl Into<String>) -> PerserError {
    PerserError::Embedding {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_embedding(seq: &EmbeddingSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.values().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    for extent in [seq.layers(), seq.frames(), seq.dim()] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in seq.values().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_embedding(utt_id: &str, bytes: &[u8], path: &Path) -> Result<EmbeddingSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad(path, "missing MPSE header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let dim_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let shape = [dim_at(6), dim_at(10), dim_at(14)];
    let count: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(bad(
            path,
            format!("header declares {shape:?} ({count} values) but body holds {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let values = Tensor::new(&shape, data)?;
    EmbeddingSequence::new(utt_id, values).map_err(|e| bad(path, e.to_string()))
}

fn embedding_path(dir: &Path, utt_id: &str) -> Result<PathBuf> {
    if utt_id.is_empty() || utt_id.contains(['/', '\\']) || utt_id.starts_with('.') {
        return Err(PerserError::Contract(format!("utterance id `{utt_id}` is not usable as a file name")));
    }
    Ok(dir.join(format!("{utt_id}.{EXTENSION}")))
}

pub fn write_embedding(dir: &Path, seq: &EmbeddingSequence) -> Result<()> {
    let path = embedding_path(dir, &seq.utt_id)?;
    let mut file = fs::File::create(&path).map_err(|e| PerserError::io(&path, e))?;
    file.write_all(&encode_embedding(seq))
        .map_err(|e| PerserError::io(&path, e))
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSequence> {
    let utt_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| bad(path, "file name is not a utterance id"))?;
    let bytes = fs::read(path).map_err(|e| PerserError::io(path, e))?;
    decode_embedding(utt_id, &bytes, path)
}

/// Embeddings keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    sequences: BTreeMap<String, Arc<EmbeddingSequence>>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads every `*.mpse` file in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        let entries = fs::read_dir(dir).map_err(|e| PerserError::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| PerserError::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(EXTENSION) {
                store.insert(read_embedding(&path)?);
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, seq: EmbeddingSequence) {
        self.sequences.insert(seq.utt_id.clone(), Arc::new(seq));
    }

    pub fn get(&self, utt_id: &str) -> Option<Arc<EmbeddingSequence>> {
        self.sequences.get(utt_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingSequence> {
        self.sequences.values().map(Arc::as_ref)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PerserError::io(dir, e))?;
        self.iter().try_for_each(|seq| write_embedding(dir, seq))
    }
}
