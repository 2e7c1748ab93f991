use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// One named array; `data` is base64 of little-endian `f64` bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl ParamEntry {
    pub fn new(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: encode_f64s(t.data()),
        }
    }

    pub fn from_slice(name: &str, shape: &[usize], data: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: encode_f64s(data),
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        decode_f64s(&self.data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.values()?)?)
    }
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::invalid(format!("bad base64 parameter data: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid("parameter data is not a whole number of f64s"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Model weights plus an echo of the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}
