//! Binary artifact container: a magic tag, a JSON header (kind, format
//! version, free-form metadata, array index) and little-endian `f64` data.
//! Loading reproduces every array bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamStore};

const MAGIC: &[u8; 8] = b"ENVTTSCK";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub arrays: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, version: u32, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            version,
            meta,
            arrays: ParamStore::new(),
        }
    }

    /// Adds every array of `store` under `<group>/<name>`.
    pub fn put_group(&mut self, group: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.arrays.insert(format!("{group}/{name}"), m.clone());
        }
    }

    pub fn group(&self, group: &str) -> ParamStore {
        let prefix = format!("{group}/");
        let mut out = ParamStore::new();
        for (name, m) in self.arrays.iter() {
            if let Some(rest) = name.strip_prefix(&prefix) {
                out.insert(rest, m.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            version: self.version,
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ArrayEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.arrays.n_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.arrays.iter() {
            for v in m.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Incompatible(format!("{}: {msg}", origin.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut arrays = ParamStore::new();
        for e in &header.arrays {
            let n = e.rows * e.cols;
            let chunk = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated data"))?;
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(
                e.name.clone(),
                Mat::from_shape_vec((e.rows, e.cols), data).map_err(|_| bad("bad array shape"))?,
            );
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            version: header.version,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically (temporary file then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Loads and checks the kind and format version.
    pub fn load_expect(path: impl AsRef<Path>, kind: &str, version: u32) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        if ck.kind != kind || ck.version != version {
            return Err(Error::ArtifactVersion {
                path: path.to_path_buf(),
                expected: format!("{kind} v{version}"),
                found: format!("{} v{}", ck.kind, ck.version),
            });
        }
        Ok(ck)
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint metadata lacks '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
/// Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
