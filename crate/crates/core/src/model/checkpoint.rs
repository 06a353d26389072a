//! `HEI1` checkpoint files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HEI1"
//!      4     4  in_bands        u32 LE
//!      8     4  base_channels   u32 LE
//!     12     4  depth           u32 LE
//!     16     4  attention_rank  u32 LE
//!     20     4  attention_mode  u32 LE (0 none, 1 spatial, 2 spectral, 3 both)
//!     24     8  seed            u64 LE
//!     32    32  SHA-256 of bytes 4..32
//!     64     8  parameter count u64 LE
//!     72   4·n  parameters in canonical name order, f32 LE
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AttentionMode, ModelConfig, ModelParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hsio::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HEI1";
const CONFIG_END: usize = 32;
const HASH_END: usize = 64;
const HEADER_LEN: usize = 72;

fn config_bytes(config: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(CONFIG_END - 4);
    for v in [
        config.in_bands,
        config.base_channels,
        config.depth,
        config.attention_rank,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Capacity(format!("config value {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.attention_mode.code().to_le_bytes());
    out.extend_from_slice(&config.seed.to_le_bytes());
    Ok(out)
}

/// SHA-256 of the binary config header.
pub(crate) fn config_hash(config: &ModelConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(config_bytes(config)?).into())
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let header = config_bytes(params.config())?;
    let count = params.parameter_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&header);
    out.extend_from_slice(&Sha256::digest(&header));
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses a checkpoint. When `expected` is given, a checkpoint whose config
/// hash differs is refused.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HEI1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header, expected {HEADER_LEN} bytes"),
        ));
    }
    let stored: [u8; 32] = bytes[CONFIG_END..HASH_END].try_into().unwrap();
    let actual: [u8; 32] = Sha256::digest(&bytes[4..CONFIG_END]).into();
    if stored != actual {
        return Err(Error::format(
            CONFIG_END as u64,
            "config hash does not match the config header",
        ));
    }
    let mode_code = read_u32(bytes, 20);
    let attention_mode = AttentionMode::from_code(mode_code)
        .ok_or_else(|| Error::format(20, format!("unknown attention mode code {mode_code}")))?;
    let config = ModelConfig {
        in_bands: read_u32(bytes, 4) as usize,
        base_channels: read_u32(bytes, 8) as usize,
        depth: read_u32(bytes, 12) as usize,
        attention_rank: read_u32(bytes, 16) as usize,
        attention_mode,
        seed: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    };
    config
        .validate()
        .map_err(|e| Error::format(4, format!("invalid config header: {e}")))?;
    if let Some(exp) = expected {
        if config_hash(exp)? != stored {
            return Err(Error::Config(format!(
                "checkpoint config {config:?} does not match the requested config {exp:?}"
            )));
        }
    }
    let specs = config.param_specs();
    let count: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let stored_count = u64::from_le_bytes(bytes[HASH_END..HEADER_LEN].try_into().unwrap());
    if stored_count != count as u64 {
        return Err(Error::format(
            HASH_END as u64,
            format!("parameter count {stored_count}, config implies {count}"),
        ));
    }
    let expected_len = HEADER_LEN + 4 * count;
    if bytes.len() < expected_len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated parameters, expected {expected_len} bytes"),
        ));
    }
    if bytes.len() > expected_len {
        return Err(Error::format(
            expected_len as u64,
            format!("{} trailing bytes after parameters", bytes.len() - expected_len),
        ));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    if let Some(pos) = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .position(|b| !f32::from_le_bytes(b.try_into().unwrap()).is_finite())
    {
        return Err(Error::format((HEADER_LEN + 4 * pos) as u64, "non-finite parameter"));
    }
    let tensors = specs
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_parts(config, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
