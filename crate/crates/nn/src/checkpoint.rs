//! Checkpoint container.
//!
//! Layout (little-endian, safetensors-compatible):
//!
//! ```text
//! u64 header_len | header_len bytes of JSON | raw f32 data
//! ```
//!
//! The JSON header maps every tensor name to `{dtype, shape, data_offsets}`
//! (offsets relative to the start of the data section) and carries the model
//! configuration as a JSON string under `__metadata__.config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ArchitectureId, Classifier, ModelConfig};
use crate::error::{ModelError, Result};

const FORMAT: &str = "mammo-nn-checkpoint";
const VERSION: &str = "1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// A named f32 array as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Writes named tensors plus string metadata into one container file.
pub fn write_tensors(
    path: &Path,
    metadata: &BTreeMap<String, String>,
    tensors: &[TensorEntry],
) -> Result<()> {
    let mut header = serde_json::Map::new();
    header.insert(
        METADATA_KEY.into(),
        serde_json::to_value(metadata).expect("string map serializes"),
    );
    let mut offset = 0usize;
    for t in tensors {
        let bytes = t.data.len() * 4;
        let entry = EntryHeader {
            dtype: "F32".into(),
            shape: t.shape.clone(),
            data_offsets: [offset, offset + bytes],
        };
        header.insert(
            t.name.clone(),
            serde_json::to_value(entry).expect("entry serializes"),
        );
        offset += bytes;
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut buf = Vec::with_capacity(8 + json.len() + offset);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads every tensor and the metadata map from a container file.
pub fn read_tensors(path: &Path) -> Result<(BTreeMap<String, String>, Vec<TensorEntry>)> {
    let corrupt = |reason: String| ModelError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size")))?;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let data = &bytes[data_start..];
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata =
                serde_json::from_value(value).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
            continue;
        }
        let entry: EntryHeader = serde_json::from_value(value)
            .map_err(|e| corrupt(format!("bad entry `{name}`: {e}")))?;
        if entry.dtype != "F32" {
            return Err(corrupt(format!(
                "`{name}` has unsupported dtype {}",
                entry.dtype
            )));
        }
        let [begin, end] = entry.data_offsets;
        let expected = entry.shape.iter().product::<usize>() * 4;
        if begin > end || end > data.len() || end - begin != expected {
            return Err(corrupt(format!(
                "`{name}` data range {begin}..{end} is invalid"
            )));
        }
        let values = data[begin..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(TensorEntry {
            name,
            shape: entry.shape,
            data: values,
        });
    }
    Ok((metadata, tensors))
}

pub(crate) fn save(model: &Classifier, path: &Path) -> Result<()> {
    let mut metadata = BTreeMap::new();
    metadata.insert("format".to_string(), FORMAT.to_string());
    metadata.insert("version".to_string(), VERSION.to_string());
    metadata.insert(
        "config".to_string(),
        serde_json::to_string(model.config()).expect("config serializes"),
    );
    let tensors: Vec<TensorEntry> = model
        .params()
        .into_iter()
        .map(|p| TensorEntry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            data: p.value.clone(),
        })
        .collect();
    write_tensors(path, &metadata, &tensors)
}

pub(crate) fn load(path: &Path, expected: Option<ArchitectureId>) -> Result<Classifier> {
    let corrupt = |reason: String| ModelError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let (metadata, tensors) = read_tensors(path)?;
    if metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(corrupt("missing checkpoint format marker".into()));
    }
    let config_json = metadata
        .get("config")
        .ok_or_else(|| corrupt("missing model config".into()))?;
    let config: ModelConfig =
        serde_json::from_str(config_json).map_err(|e| corrupt(format!("bad model config: {e}")))?;
    if let Some(expected) = expected {
        if expected != config.arch {
            return Err(ModelError::ArchitectureMismatch {
                expected: expected.to_string(),
                found: config.arch.to_string(),
            });
        }
    }
    let mut model = Classifier::skeleton(&config)?;
    let mut by_name: BTreeMap<String, TensorEntry> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    for p in model.params_mut() {
        let t = by_name
            .remove(p.name())
            .ok_or_else(|| corrupt(format!("missing tensor `{}`", p.name())))?;
        if t.shape != p.shape() {
            return Err(corrupt(format!(
                "`{}` has shape {:?}, expected {:?}",
                p.name(),
                t.shape,
                p.shape()
            )));
        }
        p.value = t.data;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(corrupt(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

/// Initializes every backbone parameter (head excluded) from a weight
/// container. A stem kernel stored with more input channels than the model
/// uses is reduced by summing over the input-channel axis.
pub(crate) fn load_backbone_weights(model: &mut Classifier, path: &Path) -> Result<()> {
    let unavailable =
        |msg: String| ModelError::WeightsUnavailable(format!("{}: {msg}", path.display()));
    if !path.exists() {
        return Err(unavailable("file not found".into()));
    }
    let (_, tensors) = read_tensors(path).map_err(|e| unavailable(e.to_string()))?;
    let mut by_name: BTreeMap<String, TensorEntry> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let arch = model.arch();
    let head_prefix = format!("{}.", arch.head_name());
    let stem = arch.stem_weight_name();
    for p in model.params_mut() {
        if p.name().starts_with(&head_prefix) {
            continue;
        }
        let t = by_name
            .remove(p.name())
            .ok_or_else(|| unavailable(format!("missing `{}`", p.name())))?;
        if t.shape == p.shape() {
            p.value = t.data;
        } else if p.name() == stem
            && t.shape.len() == 4
            && t.shape[0] == p.shape()[0]
            && t.shape[2..] == p.shape()[2..]
            && p.shape()[1] == 1
        {
            let (cout, cin, taps) = (t.shape[0], t.shape[1], t.shape[2] * t.shape[3]);
            for o in 0..cout {
                for k in 0..taps {
                    p.value[o * taps + k] =
                        (0..cin).map(|i| t.data[(o * cin + i) * taps + k]).sum();
                }
            }
        } else {
            return Err(unavailable(format!(
                "`{}` has shape {:?}, model expects {:?}",
                p.name(),
                t.shape,
                p.shape()
            )));
        }
    }
    Ok(())
}
