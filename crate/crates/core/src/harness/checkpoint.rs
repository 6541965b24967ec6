//! Checkpoint file: 8-byte little-endian header length, a JSON header, then
//! a blob of little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lvt_tensor::Element;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::model::VaeModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` is missing from the checkpoint")]
    MissingTensor(String),
    #[error("checkpoint blob is truncated: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Training state (step, rng counters, optimizer scalars).
    #[serde(default)]
    pub state: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, state: serde_json::Value) -> Self {
        Self {
            config,
            state,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.insert(name.into(), (shape.to_vec(), data));
    }

    /// Adds every model parameter under its own name.
    pub fn insert_model<T: Element>(&mut self, model: &VaeModel<T>) {
        for (name, p) in model.params() {
            let data = p.data().iter().map(|x| x.as_f64() as f32).collect();
            self.insert(name, p.shape(), data);
        }
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f32>), CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Overwrites the model parameters; every shape must match.
    pub fn apply_to<T: Element>(&self, model: &VaeModel<T>) -> Result<(), CheckpointError> {
        let params = model.params();
        for (name, p) in &params {
            let (shape, _) = self.get(name)?;
            if shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: shape.clone(),
                });
            }
        }
        for (name, p) in &params {
            let (_, data) = self.get(name)?;
            p.set_data(data.iter().map(|&x| T::of_f64(f64::from(x))).collect())
                .map_err(|e| CheckpointError::Header(format!("tensor `{name}`: {e}")))?;
        }
        Ok(())
    }

    /// Builds a model from the stored config and parameters.
    pub fn to_model<T: Element>(&self) -> crate::Result<VaeModel<T>> {
        let model = VaeModel::new(self.config.clone(), 0)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, (shape, data)) in &self.tensors {
            entries.insert(name.clone(), TensorEntry { shape: shape.clone(), offset });
            offset += 4 * data.len();
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Header("file shorter than the length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if hlen > bytes.len() - 8 {
            return Err(CheckpointError::Header(format!(
                "header length {hlen} exceeds file size {}",
                bytes.len()
            )));
        }
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let blob = &bytes[8 + hlen..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > blob.len() {
                return Err(CheckpointError::Truncated {
                    expected: end,
                    found: blob.len(),
                });
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, (e.shape, data));
        }
        Ok(Self {
            config: header.config,
            state: header.state,
            tensors,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ModelConfig::default(), serde_json::json!({"step": 3}));
        c.insert("a", &[2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]);
        c.insert("b", &[3], vec![0.1, 0.2, 0.3]);
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors, c.tensors);
        assert_eq!(back.state["step"], 3);
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = sample().to_bytes();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(short), Err(CheckpointError::Truncated { .. })));

        let text = String::from_utf8_lossy(&bytes[8..]).into_owned();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = text[..hlen].replace("\"version\":1", "\"version\":9");
        let mut v = (header.len() as u64).to_le_bytes().to_vec();
        v.extend_from_slice(header.as_bytes());
        v.extend_from_slice(&bytes[8 + hlen..]);
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        ));

        let mut corrupt = bytes.clone();
        corrupt[8] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(CheckpointError::Header(_))));
        assert!(matches!(Checkpoint::from_bytes(&[1, 2]), Err(CheckpointError::Header(_))));
    }
}
