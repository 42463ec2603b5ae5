//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "USWM" | version u32 | header_len u64 | header JSON | payload_len u64 | payload | checksum u64
//! ```
//!
//! The header holds the architecture, loss, M, per-layer scales and
//! training metadata; the payload is every parameter as `f32`, in flat
//! parameter order. The checksum is the first 8 bytes of SHA-256 over the
//! header and payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::reports::write_atomic;
use crate::error::{Error, Result};
use crate::nngraph::{Affine, Layer, LossKind, Network, Tensor};

pub const MAGIC: &[u8; 4] = b"USWM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {found:?}, expected \"USWM\"")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub quant_aware: bool,
    /// Final training accuracy (fraction).
    pub accuracy: Option<f64>,
    /// Whether batch-norm statistics were folded into affine layers.
    pub batch_norm_folded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum LayerDesc {
    Dense {
        outputs: usize,
        inputs: usize,
        bias: bool,
    },
    Conv2D {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        bias: bool,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2D {
        size: usize,
        stride: usize,
    },
    AvgPool2D {
        size: usize,
        stride: usize,
    },
    Flatten,
    ResidualAdd {
        source: usize,
    },
    BatchNormAffine(Affine),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    loss: LossKind,
    quant_bits: u32,
    layers: Vec<LayerDesc>,
    scales: Vec<Option<f64>>,
    meta: TrainingMeta,
}

fn describe(layer: &Layer) -> LayerDesc {
    match layer {
        Layer::Dense(d) => LayerDesc::Dense {
            outputs: d.weight.shape()[0],
            inputs: d.weight.shape()[1],
            bias: d.bias.is_some(),
        },
        Layer::Conv2D(c) => {
            let s = c.weight.shape();
            LayerDesc::Conv2D {
                out_channels: s[0],
                in_channels: s[1],
                kernel_h: s[2],
                kernel_w: s[3],
                bias: c.bias.is_some(),
                stride: c.stride,
                padding: c.padding,
            }
        }
        Layer::Relu => LayerDesc::Relu,
        Layer::MaxPool2D { size, stride } => LayerDesc::MaxPool2D {
            size: *size,
            stride: *stride,
        },
        Layer::AvgPool2D { size, stride } => LayerDesc::AvgPool2D {
            size: *size,
            stride: *stride,
        },
        Layer::Flatten => LayerDesc::Flatten,
        Layer::ResidualAdd { source } => LayerDesc::ResidualAdd { source: *source },
        Layer::BatchNormAffine(a) => LayerDesc::BatchNormAffine(a.clone()),
    }
}

fn build(desc: &LayerDesc) -> Layer {
    let bias = |has: bool, n: usize| has.then(|| Tensor::zeros(vec![n]));
    match desc {
        LayerDesc::Dense { outputs, inputs, bias: b } => {
            Layer::dense(Tensor::zeros(vec![*outputs, *inputs]), bias(*b, *outputs))
        }
        LayerDesc::Conv2D {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            bias: b,
            stride,
            padding,
        } => Layer::conv2d(
            Tensor::zeros(vec![*out_channels, *in_channels, *kernel_h, *kernel_w]),
            bias(*b, *out_channels),
            *stride,
            *padding,
        ),
        LayerDesc::Relu => Layer::Relu,
        LayerDesc::MaxPool2D { size, stride } => Layer::MaxPool2D {
            size: *size,
            stride: *stride,
        },
        LayerDesc::AvgPool2D { size, stride } => Layer::AvgPool2D {
            size: *size,
            stride: *stride,
        },
        LayerDesc::Flatten => Layer::Flatten,
        LayerDesc::ResidualAdd { source } => Layer::ResidualAdd { source: *source },
        LayerDesc::BatchNormAffine(a) => Layer::BatchNormAffine(a.clone()),
    }
}

fn checksum(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Serializes a network. Parameters are stored as `f32`; networks trained
/// here keep their latent weights on the `f32` grid, so the round trip is
/// exact.
pub fn encode_checkpoint(net: &Network, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        loss: net.loss_kind(),
        quant_bits: net.quant_bits(),
        layers: net.layers().iter().map(describe).collect(),
        scales: net.scales().to_vec(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Serialize(e.to_string()))?;
    let payload: Vec<u8> = net.params().iter().flat_map(|&w| (w as f32).to_le_bytes()).collect();
    let mut out = Vec::with_capacity(4 + 4 + 16 + header.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum(&[&header, &payload]).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, TrainingMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| CheckpointError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() }.into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let header_len = c.u64()? as usize;
    let header_bytes = c.take(header_len)?;
    let payload_len = c.u64()? as usize;
    let payload = c.take(payload_len)?;
    let stored = c.u64()?;
    let computed = checksum(&[header_bytes, payload]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)).into());
    }
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let layers = header.layers.iter().map(build).collect();
    let mut net = Network::new(header.input_shape, layers, header.loss, header.quant_bits)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if payload.len() != 4 * net.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "payload holds {} bytes, architecture needs {}",
            payload.len(),
            4 * net.param_count()
        ))
        .into());
    }
    let params: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    net.set_params(&params)?;
    net.set_scales(header.scales)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((net, header.meta))
}

pub fn save_checkpoint(net: &Network, meta: &TrainingMeta, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
