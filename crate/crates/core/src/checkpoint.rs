//! Self-describing model checkpoints.
//!
//! Layout: the magic `PROMCKPT`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then every parameter tensor as little-endian `f64`
//! in the order listed by the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::model::{ModelConfig, ProminenceModel};
use crate::training::AdamConfig;

const MAGIC: &[u8; 8] = b"PROMCKPT";
const VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub feature_config_hash: String,
    pub step: u64,
    pub optimizer: AdamConfig,
    pub validation_pearson: Option<f64>,
    /// Hash of the full run configuration, for provenance.
    #[serde(default)]
    pub run_config_hash: Option<String>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ProminenceModel,
    pub feature_config_hash: String,
    pub step: u64,
    pub optimizer: AdamConfig,
    pub validation_pearson: Option<f64>,
    pub run_config_hash: Option<String>,
}

fn tensor_infos(model: &ProminenceModel) -> Vec<TensorInfo> {
    let named = model
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("encoder.{i}"), l))
        .chain(
            model
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("decoder.{i}"), l)),
        );
    named
        .flat_map(|(prefix, layer)| {
            [
                TensorInfo {
                    name: format!("{prefix}.weight"),
                    shape: vec![layer.output_channels(), layer.input_channels(), layer.kernel_size],
                },
                TensorInfo {
                    name: format!("{prefix}.bias"),
                    shape: vec![layer.output_channels()],
                },
            ]
        })
        .collect()
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.model.config.clone(),
            feature_config_hash: self.feature_config_hash.clone(),
            step: self.step,
            optimizer: self.optimizer.clone(),
            validation_pearson: self.validation_pearson,
            run_config_hash: self.run_config_hash.clone(),
            tensors: tensor_infos(&self.model),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("serializable header");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.model.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for tensor in self.model.parameters() {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("checkpoint", reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != VERSION {
            return Err(bad("unsupported version"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if header_len > MAX_HEADER || header_len as usize > bytes.len() - 20 {
            return Err(bad("header length out of range"));
        }
        let header_end = 20 + header_len as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])?;
        header.config.validate()?;
        let body = &bytes[header_end..];
        // Size check before allocating a model from an untrusted header.
        if expected_parameters(&header.config).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(bad("parameter data length does not match configuration"));
        }

        let mut model = ProminenceModel::new(header.config.clone(), 0)?;
        if tensor_infos(&model) != header.tensors {
            return Err(bad("tensor list does not match configuration"));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for tensor in model.parameters_mut() {
            for slot in tensor.iter_mut() {
                *slot = values.next().expect("length checked");
            }
        }
        if model.parameters().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            model,
            feature_config_hash: header.feature_config_hash,
            step: header.step,
            optimizer: header.optimizer,
            validation_pearson: header.validation_pearson,
            run_config_hash: header.run_config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).with_path(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).with_path(path)?)
    }
}

fn expected_parameters(config: &ModelConfig) -> Option<usize> {
    let (c, i, k, n) = (
        config.channels,
        config.input_channels,
        config.kernel_size,
        config.layers_per_stack,
    );
    let hidden = c.checked_mul(c)?.checked_mul(k)?.checked_add(c)?;
    let first = c.checked_mul(i)?.checked_mul(k)?.checked_add(c)?;
    let last = c.checked_mul(k)?.checked_add(1)?;
    let repeated = hidden.checked_mul(2 * n.checked_sub(1)?)?;
    first.checked_add(last)?.checked_add(repeated)
}
