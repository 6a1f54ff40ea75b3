//! Portable weight archives.
//!
//! File layout, bit-exact:
//!   bytes 0..8    magic "CYTOWGT1"
//!   bytes 8..12   little-endian u32 header length H
//!   bytes 12..12+H  UTF-8 JSON header: {"format_version": 1,
//!                   "meta": <optional JSON>, "tensors": [{"name", "shape",
//!                   "dtype" ("f32"|"f64"), "offset"}]}
//!   rest          concatenated little-endian float data, one run per
//!                 tensor starting at its offset into this blob
//!
//! The same container stores single tensors, whole networks (layer specs
//! travel in `meta`), and named bundles of networks.

use super::layer::{Layer, LayerKind, LayerSpec};
use super::network::Network;
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CYTOWGT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderJson {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    tensors: Vec<EntryJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryJson {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// In-memory weight archive.
#[derive(Debug, Clone, Default)]
pub struct WeightArchive {
    /// Free-form metadata carried in the header (layer specs, notes).
    pub meta: Option<serde_json::Value>,
    entries: Vec<EntryJson>,
    blob: Vec<u8>,
}

impl WeightArchive {
    pub fn new() -> Self {
        WeightArchive::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Append a tensor under a unique name.
    pub fn add<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        if self.contains(name) {
            return Err(Error::InvalidParameter(format!(
                "archive already contains a tensor named {name}"
            )));
        }
        let offset = self.blob.len() as u64;
        for &v in &t.data {
            v.write_le(&mut self.blob);
        }
        self.entries.push(EntryJson {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: T::DTYPE.to_string(),
            offset,
        });
        Ok(())
    }

    /// Fetch a tensor by name, checking the stored dtype.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::NotFound(format!("archive tensor {name}")))?;
        if entry.dtype != T::DTYPE {
            return Err(Error::WeightLoad(vec![format!(
                "{name}: stored as {}, requested {}",
                entry.dtype,
                T::DTYPE
            )]));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * T::BYTES;
        if end > self.blob.len() {
            return Err(Error::WeightLoad(vec![format!(
                "{name}: data range {start}..{end} outside blob of {} bytes",
                self.blob.len()
            )]));
        }
        let data = self.blob[start..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        Tensor::from_data(&entry.shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = HeaderJson {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header_bytes.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&self.blob);
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path)?;
        let path = path.as_ref().display();
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::WeightLoad(vec![format!(
                "{path}: not a weight archive (bad magic)"
            )]));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if 12 + header_len > bytes.len() {
            return Err(Error::WeightLoad(vec![format!(
                "{path}: truncated header ({header_len} bytes declared)"
            )]));
        }
        let header: HeaderJson = serde_json::from_slice(&bytes[12..12 + header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::WeightLoad(vec![format!(
                "{path}: unsupported format version {}",
                header.format_version
            )]));
        }
        let blob = bytes[12 + header_len..].to_vec();
        let archive = WeightArchive {
            meta: header.meta,
            entries: header.tensors,
            blob,
        };
        archive.validate_ranges(&format!("{path}"))?;
        Ok(archive)
    }

    /// Check that tensor data runs are in-bounds and non-overlapping.
    fn validate_ranges(&self, context: &str) -> Result<()> {
        let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(self.entries.len());
        let mut problems = Vec::new();
        for e in &self.entries {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => {
                    problems.push(format!("{context}: {}: unknown dtype {other}", e.name));
                    continue;
                }
            };
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * width;
            if end > self.blob.len() {
                problems.push(format!(
                    "{context}: {}: range {start}..{end} outside blob of {} bytes",
                    e.name,
                    self.blob.len()
                ));
            }
            ranges.push((start, end, &e.name));
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[0].1 > pair[1].0 {
                problems.push(format!(
                    "{context}: tensors {} and {} overlap",
                    pair[0].2, pair[1].2
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::WeightLoad(problems))
        }
    }
}

/// Which parameter of a layer a mapping entry addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
}

/// Copy named archive tensors into designated layers and freeze those
/// layers. All mismatches (missing names, wrong shapes, parameterless
/// layers) are collected into one error.
pub fn load_weights<T: Scalar>(
    net: &mut Network<T>,
    archive: &WeightArchive,
    map: &[(String, usize, ParamSlot)],
) -> Result<()> {
    let mut problems = Vec::new();
    let mut staged: Vec<(usize, ParamSlot, Tensor<T>)> = Vec::new();
    for (name, layer_idx, slot) in map {
        if *layer_idx >= net.layers.len() {
            problems.push(format!("{name}: layer index {layer_idx} out of range"));
            continue;
        }
        let tensor = match archive.get::<T>(name) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        let layer = &net.layers[*layer_idx];
        let target = match slot {
            ParamSlot::Weight => layer.weight.as_ref(),
            ParamSlot::Bias => layer.bias.as_ref(),
        };
        match target {
            None => problems.push(format!(
                "{name}: layer {layer_idx} ({}) has no parameters",
                layer.spec.kind.name()
            )),
            Some(existing) if existing.shape != tensor.shape => problems.push(format!(
                "{name}: shape {:?} does not match layer {layer_idx} parameter {:?}",
                tensor.shape, existing.shape
            )),
            Some(_) => staged.push((*layer_idx, *slot, tensor)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::WeightLoad(problems));
    }
    for (layer_idx, slot, tensor) in staged {
        let layer = &mut net.layers[layer_idx];
        match slot {
            ParamSlot::Weight => layer.weight = Some(tensor),
            ParamSlot::Bias => layer.bias = Some(tensor),
        }
        layer.spec.trainable = false;
    }
    // Refresh the frozen prefix after the trainable flags changed.
    let specs = net.specs();
    net.frozen_prefix = specs.iter().take_while(|s| !s.trainable).count();
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkMeta {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
}

/// Add every parameter of `net` under `prefix` ("prefix.layerN.w" /
/// "prefix.layerN.b") and return the meta entry describing its geometry.
pub fn pack_network<T: Scalar>(
    archive: &mut WeightArchive,
    prefix: &str,
    net: &Network<T>,
) -> Result<serde_json::Value> {
    for (i, layer) in net.layers.iter().enumerate() {
        if let Some(w) = &layer.weight {
            archive.add(&format!("{prefix}.layer{i}.w"), w)?;
        }
        if let Some(b) = &layer.bias {
            archive.add(&format!("{prefix}.layer{i}.b"), b)?;
        }
    }
    Ok(serde_json::to_value(NetworkMeta {
        input_shape: net.input_shape.clone(),
        specs: net.specs(),
    })?)
}

/// Rebuild a network packed with [`pack_network`] from its meta entry and
/// tensors.
pub fn unpack_network<T: Scalar>(
    archive: &WeightArchive,
    prefix: &str,
    meta: &serde_json::Value,
) -> Result<Network<T>> {
    let meta: NetworkMeta = serde_json::from_value(meta.clone())?;
    let mut layers = Vec::with_capacity(meta.specs.len());
    for (i, spec) in meta.specs.iter().enumerate() {
        let parameterized = matches!(spec.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. });
        let (weight, bias) = if parameterized {
            (
                Some(archive.get::<T>(&format!("{prefix}.layer{i}.w"))?),
                Some(archive.get::<T>(&format!("{prefix}.layer{i}.b"))?),
            )
        } else {
            (None, None)
        };
        layers.push(Layer {
            spec: *spec,
            weight,
            bias,
        });
    }
    Network::from_parts(meta.input_shape, layers)
}

/// Persist one network per file; meta records its geometry.
pub fn save_network<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut archive = WeightArchive::new();
    let meta = pack_network(&mut archive, "net", net)?;
    archive.meta = Some(serde_json::json!({ "kind": "network", "net": meta }));
    archive.save(path)
}

/// Load a network written by [`save_network`].
pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let archive = WeightArchive::load(&path)?;
    let meta = archive
        .meta
        .as_ref()
        .and_then(|m| m.get("net"))
        .ok_or_else(|| {
            Error::WeightLoad(vec![format!(
                "{}: archive does not describe a network",
                path.as_ref().display()
            )])
        })?;
    unpack_network(&archive, "net", meta)
}
