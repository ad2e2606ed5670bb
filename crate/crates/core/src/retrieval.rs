//! Script embeddings, the reference-motion database and retrieval.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

use crate::decompose::{ScriptList, ScriptSource};
use crate::motion::{fit_rows, read_motion, MotionError, MotionSequence};
use crate::synth::LabeledSample;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_REFERENCE_FRAMES: usize = 120;
pub const INDEX_MAGIC: &[u8; 4] = b"MGDB";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("query has no scripts")]
    EmptyQuery,
    #[error("k and R must be at least 1")]
    BadParameters,
    #[error("entry {0} has no scripts")]
    EntryWithoutScripts(usize),
    #[error("embedder fingerprint mismatch: index {index:?}, embedder {embedder:?}")]
    FingerprintMismatch { index: String, embedder: String },
    #[error("embedder failure: {0}")]
    Embedder(String),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Identifies the embedding function; indices built with a different
    /// fingerprint are refused.
    fn fingerprint(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hashed term-frequency embedding: lowercase alphanumeric tokens, FNV-1a
/// bucket per token, L2-normalized counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTfEmbedder {
    pub dim: usize,
}

impl Default for HashTfEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashTfEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hash-tf-fnv1a64-v1-dim{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[(fnv1a64(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Embeds every script as one row.
pub fn embed_scripts(scripts: &ScriptList, embedder: &dyn TextEmbedder) -> Result<Array2<f64>> {
    let dim = embedder.dim();
    let mut out = Array2::zeros((scripts.len(), dim));
    for (i, s) in scripts.scripts.iter().enumerate() {
        let e = embedder.embed(s)?;
        if e.len() != dim {
            return Err(RetrievalError::Embedder(format!(
                "expected {dim} dims, got {}",
                e.len()
            )));
        }
        out.row_mut(i).assign(&ArrayView1::from(&e));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub text: String,
    pub scripts: ScriptList,
    pub script_embeddings: Array2<f64>,
    pub motion: MotionSequence,
    /// Motion file path relative to the dataset directory.
    pub motion_path: String,
    /// Index of the originating dataset sample.
    pub sample_index: usize,
}

/// Input row for [`build_database`].
#[derive(Debug, Clone)]
pub struct DbItem {
    pub text: String,
    pub scripts: ScriptList,
    pub motion: MotionSequence,
    pub motion_path: String,
    pub sample_index: usize,
}

impl DbItem {
    pub fn from_sample(index: usize, sample: &LabeledSample) -> Self {
        Self {
            text: sample.text.clone(),
            scripts: sample.scripts.clone(),
            motion: sample.motion.clone(),
            motion_path: motion_file_name(index),
            sample_index: index,
        }
    }
}

/// Relative path used for sample `index` inside a dataset directory.
pub fn motion_file_name(index: usize) -> String {
    format!("motions/{index:06}.mgm")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDatabase {
    pub fingerprint: String,
    pub dim: usize,
    pub entries: Vec<DbEntry>,
}

pub fn build_database(items: impl IntoIterator<Item = DbItem>, embedder: &dyn TextEmbedder) -> Result<MotionDatabase> {
    let mut entries = Vec::new();
    for (id, item) in items.into_iter().enumerate() {
        if item.scripts.is_empty() {
            return Err(RetrievalError::EntryWithoutScripts(id));
        }
        let script_embeddings = embed_scripts(&item.scripts, embedder)?;
        entries.push(DbEntry {
            text: item.text,
            scripts: item.scripts,
            script_embeddings,
            motion: item.motion,
            motion_path: item.motion_path,
            sample_index: item.sample_index,
        });
    }
    if entries.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    Ok(MotionDatabase {
        fingerprint: embedder.fingerprint(),
        dim: embedder.dim(),
        entries,
    })
}

impl MotionDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_embedder(&self, embedder: &dyn TextEmbedder) -> Result<()> {
        if embedder.fingerprint() != self.fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: self.fingerprint.clone(),
                embedder: embedder.fingerprint(),
            });
        }
        Ok(())
    }

    /// Position of the entry built from dataset sample `sample_index`.
    pub fn entry_for_sample(&self, sample_index: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.sample_index == sample_index)
    }
}

/// Mean over query rows of the max cosine against the entry's rows.
pub fn score_entry(query: &Array2<f64>, entry: &DbEntry) -> f64 {
    let total: f64 = query
        .rows()
        .into_iter()
        .map(|q| {
            entry
                .script_embeddings
                .rows()
                .into_iter()
                .map(|e| cosine(q.as_slice().unwrap(), e.as_slice().unwrap()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / query.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub entry: usize,
    pub score: f64,
    /// Frame range of the entry's motion copied into the reference.
    pub frames: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMotions {
    /// `R × D` raw pose features.
    pub frames: Array2<f64>,
    pub provenance: Vec<Provenance>,
}

/// Entry ids ordered by descending score, ties broken by lower id.
pub fn rank_entries(query: &Array2<f64>, db: &MotionDatabase, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = db
        .entries
        .iter()
        .enumerate()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|(id, e)| (id, score_entry(query, e)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Retrieval from pre-embedded query scripts; `exclude` skips one entry id.
pub fn retrieve_embedded(
    query: &Array2<f64>,
    db: &MotionDatabase,
    k: usize,
    r: usize,
    exclude: Option<usize>,
) -> Result<ReferenceMotions> {
    if db.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    if query.nrows() == 0 {
        return Err(RetrievalError::EmptyQuery);
    }
    if k == 0 || r == 0 {
        return Err(RetrievalError::BadParameters);
    }
    let ranked = rank_entries(query, db, exclude);
    if ranked.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let d = db.entries[ranked[0].0].motion.dim();
    let mut rows: Vec<ArrayView1<f64>> = Vec::with_capacity(r);
    let mut provenance = Vec::new();
    for &(id, score) in ranked.iter().take(k) {
        if rows.len() >= r {
            break;
        }
        let frames = &db.entries[id].motion.frames;
        let take = frames.nrows().min(r - rows.len());
        rows.extend(frames.rows().into_iter().take(take));
        provenance.push(Provenance {
            entry: id,
            score,
            frames: 0..take,
        });
    }
    let mut concat = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        concat.row_mut(i).assign(row);
    }
    Ok(ReferenceMotions {
        frames: fit_rows(&concat, r),
        provenance,
    })
}

pub fn retrieve(
    query: &ScriptList,
    db: &MotionDatabase,
    embedder: &dyn TextEmbedder,
    k: usize,
    r: usize,
) -> Result<ReferenceMotions> {
    if db.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    if query.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    db.check_embedder(embedder)?;
    retrieve_embedded(&embed_scripts(query, embedder)?, db, k, r, None)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn source_tag(s: ScriptSource) -> u8 {
    match s {
        ScriptSource::RuleBased => 0,
        ScriptSource::ExternalLlm => 1,
        ScriptSource::GroundTruth => 2,
    }
}

/// Index layout: magic, version, fingerprint, dim, entry count, one u64
/// offset per entry, then entry records (text, scripts, motion path, sample
/// index, script embeddings). Motions live in the dataset directory.
pub fn encode_index(db: &MotionDatabase) -> Vec<u8> {
    let mut records: Vec<Vec<u8>> = Vec::with_capacity(db.len());
    for e in &db.entries {
        let mut r = Vec::new();
        put_str(&mut r, &e.text);
        r.push(source_tag(e.scripts.source));
        r.extend_from_slice(&(e.scripts.len() as u32).to_le_bytes());
        for s in &e.scripts.scripts {
            put_str(&mut r, s);
        }
        put_str(&mut r, &e.motion_path);
        r.extend_from_slice(&(e.sample_index as u64).to_le_bytes());
        for v in e.script_embeddings.iter() {
            r.extend_from_slice(&v.to_le_bytes());
        }
        records.push(r);
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(db.fingerprint.len() as u16).to_le_bytes());
    buf.extend_from_slice(db.fingerprint.as_bytes());
    buf.extend_from_slice(&(db.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(db.len() as u32).to_le_bytes());
    let mut offset = (buf.len() + 8 * db.len()) as u64;
    for r in &records {
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += r.len() as u64;
    }
    for r in records {
        buf.extend_from_slice(&r);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| RetrievalError::CorruptIndex(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| RetrievalError::CorruptIndex(e.to_string()))
    }
}

/// Decodes an index; `load_motion` resolves each entry's relative path.
pub fn decode_index(
    bytes: &[u8],
    mut load_motion: impl FnMut(&str) -> Result<MotionSequence>,
) -> Result<MotionDatabase> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != INDEX_MAGIC {
        return Err(RetrievalError::CorruptIndex("bad magic".into()));
    }
    let version = rd.u16()?;
    if version != INDEX_VERSION {
        return Err(RetrievalError::CorruptIndex(format!("unsupported version {version}")));
    }
    let flen = rd.u16()? as usize;
    let fingerprint = rd.string(flen)?;
    let dim = rd.u32()? as usize;
    let count = rd.u32()? as usize;
    let offsets: Vec<u64> = (0..count).map(|_| rd.u64()).collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(count);
    for off in offsets {
        rd.pos = off as usize;
        let tlen = rd.u32()? as usize;
        let text = rd.string(tlen)?;
        let source = match rd.take(1)?[0] {
            0 => ScriptSource::RuleBased,
            1 => ScriptSource::ExternalLlm,
            2 => ScriptSource::GroundTruth,
            t => return Err(RetrievalError::CorruptIndex(format!("bad source tag {t}"))),
        };
        let n = rd.u32()? as usize;
        let mut scripts = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rd.u32()? as usize;
            scripts.push(rd.string(len)?);
        }
        let plen = rd.u32()? as usize;
        let motion_path = rd.string(plen)?;
        let sample_index = rd.u64()? as usize;
        let raw = rd.take(n * dim * 8)?;
        let emb: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let motion = load_motion(&motion_path)?;
        entries.push(DbEntry {
            text,
            scripts: ScriptList::new(scripts, source),
            script_embeddings: Array2::from_shape_vec((n, dim), emb).expect("sized read"),
            motion,
            motion_path,
            sample_index,
        });
    }
    Ok(MotionDatabase {
        fingerprint,
        dim,
        entries,
    })
}

pub fn write_index(db: &MotionDatabase, path: &Path) -> Result<()> {
    fs::write(path, encode_index(db))?;
    Ok(())
}

pub fn read_index(path: &Path, dataset_dir: &Path) -> Result<MotionDatabase> {
    let bytes = fs::read(path)?;
    decode_index(&bytes, |rel| Ok(read_motion(&dataset_dir.join(rel))?))
}
