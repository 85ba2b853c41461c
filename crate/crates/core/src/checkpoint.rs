//! Versioned checkpoint container.
//!
//! Parameters are stored as little-endian `f32` tensors in a safetensors
//! file, named `<store>/<param>`. The header metadata carries the format
//! version, the artefact kind and JSON snapshots of the config and metrics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Contents of a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub stores: BTreeMap<String, Vec<(String, Tensor)>>,
}

impl Container {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(ckpt_err(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| ckpt_err(format!("bad config: {e}")))
    }

    pub fn metrics<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.metrics.clone()).map_err(|e| ckpt_err(format!("bad metrics: {e}")))
    }

    /// Move the named store's tensors into `store`.
    pub fn restore(&mut self, label: &str, store: &mut ParamStore) -> Result<()> {
        let named = self
            .stores
            .remove(label)
            .ok_or_else(|| ckpt_err(format!("missing parameter group `{label}`")))?;
        store.load(named)
    }
}

/// Write `stores` plus metadata to `path`, atomically.
pub fn save(
    path: &Path,
    kind: &str,
    stores: &[&ParamStore],
    config: &impl Serialize,
    metrics: &impl Serialize,
) -> Result<()> {
    let mut bytes: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::new();
    for store in stores {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes.push((format!("{}/{}", store.label(), name), raw, t.shape().to_vec()));
        }
    }
    let mut views = Vec::with_capacity(bytes.len());
    for (name, raw, shape) in &bytes {
        let view = TensorView::new(Dtype::F32, shape.clone(), raw).map_err(|e| ckpt_err(e.to_string()))?;
        views.push((name.clone(), view));
    }
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("metrics".to_string(), serde_json::to_string(metrics)?);
    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(e.to_string()))?;
    write_atomic(path, &buf)
}

/// Write to a sibling temp file then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let buf = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buf)
        .map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err("checkpoint has no metadata"))?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| ckpt_err(format!("checkpoint metadata lacks `{k}`")))
    };
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| ckpt_err("unreadable format version"))?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint format {version} (expected {FORMAT_VERSION})"
        )));
    }
    let parse = |k: &str| -> Result<serde_json::Value> {
        serde_json::from_str(&field(k)?).map_err(|e| ckpt_err(format!("bad `{k}` metadata: {e}")))
    };
    let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(e.to_string()))?;
    let mut stores: BTreeMap<String, Vec<(String, Tensor)>> = BTreeMap::new();
    for (full, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ckpt_err(format!("tensor `{full}` is not f32")));
        }
        let (store, name) = full
            .split_once('/')
            .ok_or_else(|| ckpt_err(format!("tensor name `{full}` lacks a group")))?;
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(view.shape(), data)?;
        stores.entry(store.to_string()).or_default().push((name.to_string(), t));
    }
    Ok(Container {
        kind: field("kind")?,
        config: parse("config")?,
        metrics: parse("metrics")?,
        stores,
    })
}
