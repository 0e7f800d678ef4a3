//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `DAKCKPT1`, a little-endian `u32` manifest
//! length, the JSON manifest, then every tensor's data as little-endian
//! `f64` in manifest order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{Standardizer, TargetScaler};
use crate::grid::MAX_LEVEL;
use crate::model::{DakModel, ModelError, ModelSpec};

pub const MAGIC: &[u8; 8] = b"DAKCKPT1";
pub const VERSION: u32 = 1;
const MAX_MANIFEST: usize = 1 << 24;
/// Grids above this level are refused when decoding untrusted input.
pub const MAX_DECODE_LEVEL: u32 = 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor data has {got} bytes, manifest describes {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("tensor {0} is not finite")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub features: Option<Standardizer>,
    #[serde(default)]
    pub targets: Option<TargetScaler>,
}

/// A model together with the preprocessing it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DakModel,
    pub features: Option<Standardizer>,
    pub targets: Option<TargetScaler>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let params = self.model.params();
        let manifest = Manifest {
            version: VERSION,
            spec: self.model.spec().clone(),
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            features: self.features.clone(),
            targets: self.targets,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * params.iter().map(|p| p.tensor.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &params {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(CheckpointError::Magic)?;
        if rest.len() < 4 {
            return Err(CheckpointError::Truncated("manifest length"));
        }
        let (len_bytes, rest) = rest.split_at(4);
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        if len > MAX_MANIFEST {
            return Err(CheckpointError::Manifest(format!("length {len} exceeds limit")));
        }
        if rest.len() < len {
            return Err(CheckpointError::Truncated("manifest"));
        }
        let (json, data) = rest.split_at(len);
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.version != VERSION {
            return Err(CheckpointError::Version(manifest.version));
        }
        let spec = &manifest.spec;
        spec.validate()?;
        if spec.level > MAX_DECODE_LEVEL.min(MAX_LEVEL) {
            return Err(CheckpointError::Manifest(format!("grid level {} too large", spec.level)));
        }

        // Size everything from the spec before allocating anything.
        let expected = expected_shapes(spec).ok_or_else(|| CheckpointError::Manifest("parameter count overflows".into()))?;
        if manifest.tensors.len() != expected.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} tensors listed, architecture needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut total = 0usize;
        for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {} {:?} where {name} {shape:?} was expected",
                    entry.name, entry.shape
                )));
            }
            total = shape
                .iter()
                .product::<usize>()
                .checked_add(total)
                .ok_or_else(|| CheckpointError::Manifest("parameter count overflows".into()))?;
        }
        let want_bytes = total
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Manifest("parameter count overflows".into()))?;
        if data.len() != want_bytes {
            return Err(CheckpointError::DataLength {
                expected: want_bytes,
                got: data.len(),
            });
        }
        if let Some(s) = &manifest.features {
            let d = spec.input_dim();
            if s.mean.len() != d || s.std.len() != d || s.std.iter().any(|v| !(*v > 0.0 && v.is_finite())) || s.mean.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Manifest("feature standardizer does not fit the model".into()));
            }
        }
        if let Some(t) = &manifest.targets {
            if !(t.std > 0.0 && t.std.is_finite() && t.mean.is_finite()) || !spec.likelihood.is_regression() {
                return Err(CheckpointError::Manifest("bad target scaler".into()));
            }
        }

        let mut tensors = Vec::with_capacity(expected.len());
        let mut words = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for (name, shape) in &expected {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = words.by_ref().take(n).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(name.clone()));
            }
            tensors.push(Tensor::new(shape.clone(), values).expect("sized from shape"));
        }
        let mut model = DakModel::new(spec.clone(), 0)?;
        model.assign(&tensors)?;
        Ok(Self {
            model,
            features: manifest.features,
            targets: manifest.targets,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Names and shapes of every parameter of a model built from `spec`, in
/// [`DakModel::params`] order. `None` on arithmetic overflow.
fn expected_shapes(spec: &ModelSpec) -> Option<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (l, pair) in spec.widths.windows(2).enumerate() {
        pair[0].checked_mul(pair[1])?;
        out.push((format!("mlp.{l}.weight"), vec![pair[0], pair[1]]));
        out.push((format!("mlp.{l}.bias"), vec![pair[1]]));
    }
    spec.feature_dim().checked_mul(spec.units)?;
    out.push(("embed.weight".into(), vec![spec.feature_dim(), spec.units]));
    let m = (1usize << spec.level) - 1;
    let pm = spec.units.checked_mul(m)?;
    let heads = spec.likelihood.outputs();
    heads.checked_mul(pm)?;
    for c in 0..heads {
        out.push((format!("head.{c}.scales"), vec![spec.units, 1]));
        out.push((format!("head.{c}.means"), vec![pm, 1]));
        out.push((format!("head.{c}.log_vars"), vec![pm, 1]));
        out.push((format!("head.{c}.bias_mean"), vec![1, 1]));
        out.push((format!("head.{c}.bias_log_var"), vec![1, 1]));
        if out.len() > 1 << 20 {
            return None;
        }
    }
    Some(out)
}
