//! JSON checkpoints: named tensors with explicit shapes plus run metadata.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::head::{HeadParams, HeadShape};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dirmlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Resolved configuration in `key = value` form.
    pub config: String,
    pub shape: HeadShape,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &HeadParams, config_hash: &str, config: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            config: config.into(),
            shape: params.shape,
            tensors: params
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, checking every tensor name and shape.
    pub fn to_params(&self) -> Result<HeadParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::shape(
                "checkpoint format",
                format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"),
                format!("{} v{}", self.format, self.version),
            ));
        }
        let mut params = HeadParams::init(self.shape, &mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::shape("checkpoint tensors", expected.len(), self.tensors.len()));
        }
        for (((name, shape), dst), t) in expected.iter().zip(params.tensors_mut()).zip(&self.tensors) {
            if &t.name != name {
                return Err(Error::shape("checkpoint tensor name", name, &t.name));
            }
            if &t.shape != shape || t.data.len() != dst.len() {
                return Err(Error::shape(
                    name.clone(),
                    format!("{shape:?}"),
                    format!("{:?} ({} values)", t.shape, t.data.len()),
                ));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
