//! `ParameterArchive`: a named map of parameter tensors plus string metadata,
//! stored as a safetensors container. The format version and any model
//! metadata (serialized config, variant tag) live in the safetensors header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: &str = "1";
const VERSION_KEY: &str = "format_version";
const HEADER_KEY: &str = "msht";

#[derive(Debug, Clone, Default)]
pub struct ParameterArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

/// What a partial load did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters absent from the archive (left untouched).
    pub missing: Vec<String>,
    /// Archive entries with no counterpart in the store.
    pub unexpected: Vec<String>,
}

impl ParameterArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of every entry (weights and buffers) of a store.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var, _) in store.entries() {
            // copy, so later optimizer steps do not leak into the snapshot
            tensors.insert(name, var.as_tensor().detach().copy()?);
        }
        Ok(Self {
            tensors,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut info = self.metadata.clone();
        info.insert(VERSION_KEY.to_string(), FORMAT_VERSION.to_string());
        // a single header key keeps the file bytes independent of map order
        let header = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&info)?)]);
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        safetensors::serialize(data, Some(header)).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Archive("missing archive header".into()))?;
        let mut metadata: BTreeMap<String, String> =
            serde_json::from_str(raw).map_err(|e| Error::Archive(format!("bad archive header: {e}")))?;
        match metadata.remove(VERSION_KEY) {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => return Err(Error::Archive(format!("unsupported format version {v}"))),
            None => return Err(Error::Archive("missing format version".into())),
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies archive tensors into the store. Entries whose names start with
    /// `prefix` are considered; names are matched exactly. Any shape conflict
    /// aborts before anything is written.
    pub fn apply_to(&self, store: &ParamStore, prefix: &str) -> Result<LoadReport> {
        let targets: Vec<String> = store
            .names()
            .into_iter()
            .filter(|n| n.starts_with(prefix))
            .collect();
        let mut conflicts = Vec::new();
        let mut report = LoadReport::default();
        for name in &targets {
            match self.tensors.get(name) {
                Some(t) => {
                    let var = store.var(name).expect("name listed by store");
                    if var.dims() != t.dims() {
                        conflicts.push(name.clone());
                    } else {
                        report.loaded.push(name.clone());
                    }
                }
                None => report.missing.push(name.clone()),
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::ParameterConflict { names: conflicts });
        }
        for name in &report.loaded {
            store.set(name, &self.tensors[name])?;
        }
        report.unexpected = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix) && store.var(k).is_none())
            .cloned()
            .collect();
        Ok(report)
    }
}
