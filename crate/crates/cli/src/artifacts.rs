//! On-disk artifact directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use motiongen_core::decompose::{ScriptList, ScriptSource};
use motiongen_core::motion::{read_motion, write_motion, FeatureStats, Skeleton};
use motiongen_core::retrieval::motion_file_name;
use motiongen_core::synth::{CompositionSpec, Dataset, LabeledSample, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const LABELS: &str = "labels.jsonl";
pub const STATS: &str = "stats.json";
pub const SKELETON: &str = "skeleton.txt";
pub const INDEX: &str = "index.mgi";
pub const CHECKPOINT: &str = "model.mgc";
pub const HISTORY: &str = "history.csv";

/// Key under `fingerprints` holding the digest of the artifact's own files.
pub const SELF_FP: &str = "artifact";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Own digest plus the digests of every upstream artifact and module
    /// identity this one was built from.
    pub fingerprints: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    /// Files covered by the artifact digest, relative to the directory.
    pub files: Vec<String>,
    /// Wall-clock field; the only content allowed to differ between reruns.
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(kind: &str, config_hash: String) -> Self {
        Self {
            kind: kind.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seeds: BTreeMap::new(),
            fingerprints: BTreeMap::new(),
            counts: BTreeMap::new(),
            files: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn artifact(&self) -> &str {
        self.fingerprints.get(SELF_FP).map_or("", String::as_str)
    }

    pub fn fingerprint(&self, key: &str) -> Result<&str, CliError> {
        self.fingerprints
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Fingerprint(format!("{} manifest lacks a `{key}` fingerprint", self.kind)))
    }

    /// Digests `files`, records them, and writes the manifest last.
    pub fn seal(mut self, dir: &Path, mut files: Vec<String>) -> Result<Self, CliError> {
        files.sort();
        self.fingerprints.insert(SELF_FP.into(), digest_files(dir, &files)?);
        self.files = files;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(self)
    }
}

/// SHA-256 over `(name, length, bytes)` of each file in order.
pub fn digest_files(dir: &Path, files: &[String]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(dir.join(f)).map_err(|_| CliError::missing(&dir.join(f)))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Loads a manifest of the expected kind and checks the files still match it.
pub fn open_artifact(dir: &Path, kind: &str) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|_| CliError::missing(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if m.kind != kind {
        return Err(CliError::Fingerprint(format!(
            "{} holds a {} artifact, expected {kind}",
            dir.display(),
            m.kind
        )));
    }
    let actual = digest_files(dir, &m.files)?;
    if actual != m.artifact() {
        return Err(CliError::Fingerprint(format!(
            "{kind} files in {} changed since the manifest was written",
            dir.display()
        )));
    }
    Ok(m)
}

/// Fails unless `downstream` recorded `upstream`'s digest under `key`.
pub fn require_link(downstream: &Manifest, key: &str, upstream: &Manifest) -> Result<(), CliError> {
    let recorded = downstream.fingerprint(key)?;
    if recorded != upstream.artifact() {
        return Err(CliError::Fingerprint(format!(
            "{} was built from {key} {recorded}, found {}",
            downstream.kind,
            upstream.artifact()
        )));
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    index: usize,
    text: String,
    scripts: Vec<String>,
    split: Split,
    motion: String,
    composition: CompositionSpec,
}

/// Writes motions, labels, stats and skeleton; returns the written files.
pub fn write_dataset(dir: &Path, ds: &Dataset, skeleton: &Skeleton) -> Result<Vec<String>, CliError> {
    ensure_dir(&dir.join("motions"))?;
    let mut files = Vec::with_capacity(ds.samples.len() + 3);
    let mut labels = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = motion_file_name(i);
        write_motion(&s.motion, &dir.join(&rel))?;
        let rec = LabelRecord {
            index: i,
            text: s.text.clone(),
            scripts: s.scripts.scripts.clone(),
            split: s.split,
            motion: rel.clone(),
            composition: s.composition.clone(),
        };
        serde_json::to_writer(&mut labels, &rec)?;
        labels.push(b'\n');
        files.push(rel);
    }
    fs::write(dir.join(LABELS), labels)?;
    fs::write(dir.join(STATS), serde_json::to_string_pretty(&ds.stats)? + "\n")?;
    skeleton.write(&dir.join(SKELETON))?;
    files.extend([LABELS.to_string(), STATS.to_string(), SKELETON.to_string()]);
    Ok(files)
}

pub fn read_dataset(dir: &Path, seed: u64) -> Result<(Dataset, Skeleton), CliError> {
    let skeleton = Skeleton::read(&dir.join(SKELETON))?;
    let stats: FeatureStats = serde_json::from_slice(&fs::read(dir.join(STATS))?)?;
    let reader = BufReader::new(fs::File::open(dir.join(LABELS))?);
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord =
            serde_json::from_str(&line).map_err(|e| CliError::Runtime(format!("{LABELS} line {}: {e}", n + 1)))?;
        if rec.index != samples.len() {
            return Err(CliError::Runtime(format!(
                "{LABELS} line {}: index {} out of order",
                n + 1,
                rec.index
            )));
        }
        samples.push(LabeledSample {
            motion: read_motion(&dir.join(&rec.motion))?,
            text: rec.text,
            scripts: ScriptList::new(rec.scripts, ScriptSource::GroundTruth),
            composition: rec.composition,
            split: rec.split,
        });
    }
    Ok((Dataset { samples, stats, seed }, skeleton))
}

/// Epoch, train loss, validation MSE.
pub fn write_history(path: &Path, history: &[motiongen_core::train::EpochRecord]) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_mse")?;
    for r in history {
        let val = r.val_mse.map_or(String::new(), |v| format!("{v:.6e}"));
        writeln!(f, "{},{:.6e},{val}", r.epoch, r.train_loss)?;
    }
    Ok(())
}
