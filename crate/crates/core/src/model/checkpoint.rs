//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DFCNCKPT`, a little-endian `u64` header length,
//! a JSON header, then the parameter tensors as concatenated `TSR1` records.
//! Offsets in the header are relative to the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::NetworkConfig;
use crate::model::network::Network;
use crate::tensor::{decode_f32, encode_f32};

const MAGIC: &[u8; 8] = b"DFCNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(net: &Network, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in net.params() {
        let rec = encode_f32(t)?;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
            length: rec.len(),
        });
        payload.extend_from_slice(&rec);
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        seed: net.seed,
        config_hash: config_hash.map(str::to_string),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Provenance stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub config: NetworkConfig,
    pub seed: u64,
    pub config_hash: Option<String>,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint truncated before header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Format("corrupted header: length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| Error::Format(format!("corrupted header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[16 + len..]))
}

pub fn checkpoint_info(bytes: &[u8]) -> Result<CheckpointInfo> {
    let (h, _) = parse_header(bytes)?;
    Ok(CheckpointInfo {
        config: h.config,
        seed: h.seed,
        config_hash: h.config_hash,
    })
}

pub fn read_checkpoint_info(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    checkpoint_info(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let (header, payload) = parse_header(bytes)?;
    let mut net = Network::build(&header.config, header.seed)?;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "tensor directory lists {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), entry) in net.params_mut().into_iter().zip(&names).zip(&header.tensors) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(Error::Format(format!(
                "tensor directory entry {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let rec = payload
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| Error::Format(format!("truncated payload for {name}")))?;
        let (t, used) = decode_f32(rec)?;
        if used != entry.length || t.shape() != slot.shape() {
            return Err(Error::Format(format!("payload for {name} is malformed")));
        }
        *slot = t;
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_hash(net, None, path)
}

pub fn save_checkpoint_with_hash(
    net: &Network,
    config_hash: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net, config_hash)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads and insists on the given architecture.
pub fn load_checkpoint_strict(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Network> {
    let net = load_checkpoint(path)?;
    if &net.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {} differs from expected {}",
            serde_json::to_string(&net.config)?,
            serde_json::to_string(expected)?
        )));
    }
    Ok(net)
}
