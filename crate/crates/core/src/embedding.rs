//! `C2FL-EMB` embedding container: `manifest.json` plus a raw `vectors.f32`
//! payload of `count × dim` little-endian floats.
//!
//! Entry keys are `class:<name>` for text prototypes and `sample:<index>` for
//! per-sample image embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "C2FL-EMB";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "vectors.f32";

/// Norm deviation above which a loaded vector is reported.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;
/// Norm deviation above which a loaded vector is renormalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub prompt_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum EmbeddingKey {
    Class(String),
    Sample(usize),
}

impl EmbeddingKey {
    pub fn parse(key: &str) -> Result<Self> {
        match key.split_once(':') {
            Some(("class", name)) if !name.is_empty() => Ok(Self::Class(name.to_string())),
            Some(("sample", id)) => id
                .parse()
                .map(Self::Sample)
                .map_err(|_| Error::Format(format!("bad sample index in key {key:?}"))),
            _ => Err(Error::Format(format!("unrecognized entry key {key:?}"))),
        }
    }

    pub fn encode(&self) -> String {
        match self {
            Self::Class(name) => format!("class:{name}"),
            Self::Sample(id) => format!("sample:{id}"),
        }
    }
}

/// In-memory contents of an embedding container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub prompt_template: String,
    pub model: Option<String>,
    /// Class prototypes in row order.
    pub classes: Vec<(String, Vec<f32>)>,
    pub samples: BTreeMap<usize, Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedEmbeddings {
    pub set: EmbeddingSet,
    pub warnings: Vec<String>,
}

impl EmbeddingSet {
    pub fn class_vector(&self, name: &str) -> Option<&[f32]> {
        self.classes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn count(&self) -> usize {
        self.classes.len() + self.samples.len()
    }
}

/// Writes `set` to `dir`; classes first, then samples in index order.
pub fn write_embeddings(dir: &Path, set: &EmbeddingSet) -> Result<()> {
    let rows: Vec<(EmbeddingKey, &Vec<f32>)> = set
        .classes
        .iter()
        .map(|(n, v)| (EmbeddingKey::Class(n.clone()), v))
        .chain(set.samples.iter().map(|(&i, v)| (EmbeddingKey::Sample(i), v)))
        .collect();
    let mut payload = Vec::with_capacity(rows.len() * set.dim * 4);
    let mut entries = Vec::with_capacity(rows.len());
    for (row, (key, v)) in rows.iter().enumerate() {
        if v.len() != set.dim {
            return Err(Error::dim("embedding row", set.dim, v.len()));
        }
        payload.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        entries.push(ManifestEntry { key: key.encode(), row });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        dim: set.dim,
        count: rows.len(),
        dtype: DTYPE.into(),
        prompt_template: set.prompt_template.clone(),
        model: set.model.clone(),
        entries,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Reads and validates a container. Vectors whose norm is off by more than
/// [`NORM_TOLERANCE`] are renormalized; deviations above
/// [`NORM_WARN_TOLERANCE`] are also reported in `warnings`.
pub fn load_embeddings(dir: &Path) -> Result<LoadedEmbeddings> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Format(format!("bad magic {:?}, expected {FORMAT_TAG:?}", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    if manifest.entries.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest count {} but {} entries",
            manifest.count,
            manifest.entries.len()
        )));
    }
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected = manifest.count * manifest.dim * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, manifest implies {expected} ({} rows x {} dims)",
            payload.len(),
            manifest.count,
            manifest.dim
        )));
    }

    let mut seen_keys = BTreeSet::new();
    let mut seen_rows = BTreeSet::new();
    let mut set = EmbeddingSet {
        dim: manifest.dim,
        prompt_template: manifest.prompt_template.clone(),
        model: manifest.model.clone(),
        ..Default::default()
    };
    let mut warnings = Vec::new();
    let mut class_rows = Vec::new();
    for entry in &manifest.entries {
        if !seen_keys.insert(entry.key.as_str()) {
            return Err(Error::Format(format!("duplicate key {:?}", entry.key)));
        }
        if entry.row >= manifest.count || !seen_rows.insert(entry.row) {
            return Err(Error::Format(format!("invalid or repeated row {} for {:?}", entry.row, entry.key)));
        }
        let bytes = &payload[entry.row * manifest.dim * 4..(entry.row + 1) * manifest.dim * 4];
        let mut v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let n = norm(&v);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Format(format!("zero or non-finite vector for {:?}", entry.key)));
        }
        let deviation = (n - 1.0).abs();
        if deviation > NORM_WARN_TOLERANCE {
            let msg = format!("{}: norm {n:.6} renormalized", entry.key);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if deviation > NORM_TOLERANCE {
            v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        }
        match EmbeddingKey::parse(&entry.key)? {
            EmbeddingKey::Class(name) => class_rows.push((entry.row, name, v)),
            EmbeddingKey::Sample(id) => {
                set.samples.insert(id, v);
            }
        }
    }
    class_rows.sort_by_key(|(row, _, _)| *row);
    set.classes = class_rows.into_iter().map(|(_, n, v)| (n, v)).collect();
    Ok(LoadedEmbeddings { set, warnings })
}
