//! Named-tensor archive: the on-disk container for weights, checkpoints and
//! latent codes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   : magic  b"PFNT"
//! offset 4   : u32    format version (1)
//! offset 8   : u64    manifest length N in bytes
//! offset 16  : N bytes of UTF-8 JSON manifest
//! offset 16+N: payload, the f64 values of every tensor back to back
//! ```
//!
//! The manifest is `{"tensors": [{"name", "shape", "dtype", "offset", "len"}],
//! "meta": {key: value}}`; `offset` and `len` count elements (not bytes) into
//! the payload, and `dtype` is always `"f64"`. Tensor order is preserved and
//! `meta` keys are sorted, so serialization is byte-deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PFNT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name, t));
        }
    }

    /// Add every tensor of `params` under `prefix.`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Fill `params` from the tensors stored under `prefix.`.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let p = format!("{prefix}.");
        let src: Vec<(&str, &Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s, t)))
            .collect();
        params.load_from(src)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Archive(m.to_string());
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("not a named-tensor archive"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let payload = &bytes[16 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Archive(format!("unsupported dtype {}", e.dtype)));
            }
            let raw = payload
                .get(e.offset * 8..(e.offset + e.len) * 8)
                .ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), key in "[a-z]{1,8}") {
            let mut a = TensorArchive::new();
            a.insert("x", Tensor::vector(values.clone()));
            a.insert("s", Tensor::scalar(values[0]));
            a.meta.insert(key, "v".into());
            let bytes = a.to_bytes().unwrap();
            let b = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(b.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorArchive::from_bytes(b"nope").is_err());
        let mut a = TensorArchive::new();
        a.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = a.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(TensorArchive::from_bytes(&bytes).is_err());
    }
}
