//! Binary model files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes      | content                                          |
//! |------------|--------------------------------------------------|
//! | 4          | magic `AF2M`                                     |
//! | 4 (u32)    | format version                                   |
//! | 4 (u32)    | header length `n`                                |
//! | n          | UTF-8 JSON header ([`Header`])                   |
//! | 8 each     | every parameter tensor as f64, in `tensors()` order |
//! | 8 each     | thresholds as f64, finest level first            |
//!
//! Floats are stored as raw bits so a load reproduces every weight and
//! threshold exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acm::ThresholdState;
use crate::cascade::{Model, ModelParams};
use crate::data::{read_file, write_file};
use crate::error::{Error, Result};
use crate::extractor::LevelRange;
use crate::optim::TrainConfig;

pub const MAGIC: &[u8; 4] = b"AF2M";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub levels: LevelRange,
    pub input_channels: usize,
    pub classes: usize,
    pub fused_width: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub gamma: f64,
    pub r: f64,
    pub config: TrainConfig,
    /// Element count of each stored tensor, for validation.
    pub tensor_lengths: Vec<usize>,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let params = &model.params;
    let header = Header {
        levels: model.levels(),
        input_channels: params.input_channels(),
        classes: params.classes(),
        fused_width: model.config.fused_width,
        hidden_width: model.config.hidden_width,
        seed: model.config.seed,
        gamma: model.thresholds.gamma(),
        r: model.thresholds.r(),
        config: model.config.clone(),
        tensor_lengths: params.tensors().iter().map(|t| t.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * (params.parameter_count() + model.thresholds.taus().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.thresholds.taus() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len(), "truncated model header"))
}

/// Decodes a model; thresholds come back frozen.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a model file (bad magic)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("model format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::format(bytes.len(), "truncated model header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(12, format!("bad header: {e}")))?;

    let config = header.config.clone();
    if config.levels()? != header.levels
        || config.fused_width != header.fused_width
        || config.hidden_width != header.hidden_width
    {
        return Err(Error::format(12, "header fields disagree with the stored config"));
    }
    let mut params = ModelParams::zeros(&config, header.input_channels, header.classes)?;
    let lengths: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if lengths != header.tensor_lengths {
        return Err(Error::format(12, "tensor layout does not match the header"));
    }

    let mut pos = 12 + header_len;
    let expected = pos + 8 * (params.parameter_count() + header.levels.len());
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!(
                "model payload is {} bytes, expected {}",
                bytes.len() - pos,
                expected - pos
            ),
        ));
    }
    let mut next = || {
        let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = next();
        }
    }
    let tau: Vec<f64> = (0..header.levels.len()).map(|_| next()).collect();
    if !params.all_finite() {
        return Err(Error::format(12 + header_len, "non-finite parameter in model file"));
    }
    let thresholds = ThresholdState::from_parts(header.levels, tau, header.gamma, header.r, true)?;
    Ok(Model {
        params,
        thresholds,
        config,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model {
        let config = TrainConfig {
            l_min: 2,
            l_max: 3,
            fused_width: 4,
            hidden_width: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut m = Model::init(&config, 3, 3).unwrap();
        m.thresholds = ThresholdState::from_parts(m.levels(), vec![0.0, 0.1 + 0.2], 0.9, 0.3, true).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_model();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.thresholds.taus()[1].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = encode_model(&small_model()).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(matches!(
            decode_model(&wrong_version),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_model(&bad_magic).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
    }
}
