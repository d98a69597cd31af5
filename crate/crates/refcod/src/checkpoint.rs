//! Native checkpoint container.
//!
//! Layout: magic `RCOD`, format version (u32 LE), header length (u64 LE),
//! a JSON header, then the payload of f64 little-endian arrays back to back.
//! The header lists every key with its shape and payload offsets; the same
//! JSON is emitted as `checkpoint.manifest.json` next to training
//! checkpoints. Keys: `param/<name>` for parameters, `adam/m/<name>` and
//! `adam/v/<name>` for optimizer moments.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RCOD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub key: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: u64,
    /// Length in f64 elements.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub step: u64,
    pub config: Option<String>,
    pub entries: Vec<EntryMeta>,
}

pub struct Container {
    pub header: Header,
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(step: u64, config: Option<String>) -> Self {
        Self {
            header: Header {
                format_version: VERSION,
                step,
                config,
                entries: Vec::new(),
            },
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: ArrayD<f64>) {
        self.arrays.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(key)
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.arrays
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(|k| k.as_str())
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        // BTreeMap iteration gives sorted keys, so bytes are deterministic.
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (key, value) in &self.arrays {
            entries.push(EntryMeta {
                key: key.clone(),
                shape: value.shape().to_vec(),
                offset,
                len: value.len() as u64,
            });
            offset += value.len() as u64;
        }
        self.header.entries = entries;
        let header_json = serde_json::to_vec(&self.header).expect("header serializes");

        let file = std::fs::File::create(path).map_err(|e| Error::WriteFailure {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let write_err = |e: std::io::Error| Error::WriteFailure {
            path: path.display().to_string(),
            source: e,
        };
        w.write_all(MAGIC).map_err(write_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(write_err)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(write_err)?;
        w.write_all(&header_json).map_err(write_err)?;
        for value in self.arrays.values() {
            for v in value.iter() {
                w.write_all(&v.to_le_bytes()).map_err(write_err)?;
            }
        }
        w.flush().map_err(write_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
        let total: usize = header.entries.iter().map(|e| e.len as usize).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header expects {}",
                payload.len(),
                total * 8
            )));
        }

        let mut arrays = BTreeMap::new();
        for entry in &header.entries {
            let start = entry.offset as usize * 8;
            let count = entry.len as usize;
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let mut b = [0u8; 8];
                b.copy_from_slice(&payload[start + i * 8..start + (i + 1) * 8]);
                data.push(f64::from_le_bytes(b));
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(format!("entry '{}': {e}", entry.key)))?;
            arrays.insert(entry.key.clone(), arr);
        }
        Ok(Self { header, arrays })
    }

    /// Pretty JSON of the header (the key manifest).
    pub fn manifest_json(&mut self) -> String {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (key, value) in &self.arrays {
            entries.push(EntryMeta {
                key: key.clone(),
                shape: value.shape().to_vec(),
                offset,
                len: value.len() as u64,
            });
            offset += value.len() as u64;
        }
        self.header.entries = entries;
        serde_json::to_string_pretty(&self.header).expect("header serializes")
    }
}

/// Save all parameters of a store under `param/<name>` keys.
pub fn save_params_only(path: &Path, store: &ParamStore) -> Result<()> {
    let mut c = Container::new(0, None);
    for id in store.ids() {
        c.insert(&format!("param/{}", store.name(id)), store.value(id).clone());
    }
    c.save(path)
}

/// Load every `param/<name>` entry into the store (names must exist and
/// shapes must match).
pub fn load_params_only(path: &Path, store: &mut ParamStore) -> Result<()> {
    let c = Container::load(path)?;
    let keys: Vec<String> = c.keys_with_prefix("param/").map(String::from).collect();
    if keys.is_empty() {
        return Err(Error::Checkpoint("no parameters in file".into()));
    }
    for key in keys {
        let name = key.trim_start_matches("param/").to_string();
        store.set_value(&name, c.get(&key).unwrap().clone())?;
    }
    Ok(())
}
