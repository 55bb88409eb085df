//! Binary parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! payload of little-endian `f64`s: `W` row-major followed by `V` row-major.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{LossKind, NetParams};

pub const FORMAT: &str = "ncflow-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint (format {found:?}, version {version})")]
    Format { found: String, version: u32 },
    #[error("payload has {got} bytes, header implies {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("invalid parameters: {0}")]
    Params(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// `[D, h, d_y]`
    pub dims: [usize; 3],
    pub loss_kind: LossKind,
    pub payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

/// Optional provenance recorded alongside the parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub step: Option<usize>,
    pub time: Option<f64>,
}

fn push_row_major(m: &DMatrix<f64>, out: &mut Vec<u8>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

pub fn encode(params: &NetParams, meta: CheckpointMeta) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * (params.w.len() + params.v.len()));
    push_row_major(&params.w, &mut payload);
    push_row_major(&params.v, &mut payload);
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        dims: [params.input_dim(), params.width(), params.output_dim()],
        loss_kind: params.loss_kind,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        epsilon: meta.epsilon,
        seed: meta.seed,
        step: meta.step,
        time: meta.time,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(NetParams, CheckpointHeader), CheckpointError> {
    let short = |expected| CheckpointError::PayloadSize {
        expected,
        got: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(short(8));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize.checked_add(hlen).ok_or_else(|| short(usize::MAX))?;
    if bytes.len() < body_start {
        return Err(short(body_start));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_start])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Format {
            found: header.format,
            version: header.version,
        });
    }
    let [d, h, dy] = header.dims;
    let payload = &bytes[body_start..];
    let expected = 8 * (d * h + dy * h);
    if payload.len() != expected {
        return Err(CheckpointError::PayloadSize {
            expected,
            got: payload.len(),
        });
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(CheckpointError::Checksum);
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let w = DMatrix::from_row_iterator(d, h, vals.by_ref().take(d * h));
    let v = DMatrix::from_row_iterator(dy, h, vals.take(dy * h));
    let params = NetParams::new(w, v, header.loss_kind)?;
    Ok((params, header))
}

pub fn save(path: impl AsRef<Path>, params: &NetParams, meta: CheckpointMeta) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(params, meta)).map_err(io)
}

pub fn load(path: impl AsRef<Path>) -> Result<(NetParams, CheckpointHeader), CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io)?;
    decode(&bytes)
}
