//! `GPCS` weights files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GPCS"               4 bytes magic
//! version              u32 (= 1)
//! network kind         u32 (1 generator, 2 discriminator, 3 pseudo-inverse)
//! condition_dim        u32
//! L                    u32, number of layer widths
//! layer_dims           L x u32
//! activation tags      L x u8 (tag 0 is the input layer and is always identity)
//! per affine layer     weight matrix (row-major f64), then bias vector (f64)
//! ```
//!
//! Activation tags: 0 identity, 1 relu, 2 leaky relu (slope 0.2), 3 tanh,
//! 4 sigmoid.

use thiserror::Error;

use crate::mlp::{Activation, MlpNetwork, DEFAULT_LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GPCS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Generator = 1,
    Discriminator = 2,
    PseudoInverse = 3,
}

impl NetworkKind {
    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(NetworkKind::Generator),
            2 => Some(NetworkKind::Discriminator),
            3 => Some(NetworkKind::PseudoInverse),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("bad magic at offset 0: expected \"GPCS\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: need {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown network kind tag {0}")]
    UnknownKind(u32),
    #[error("unknown activation tag {tag} at offset {offset}")]
    UnknownActivation { offset: usize, tag: u8 },
    #[error("activation {0} cannot be stored in a weights file")]
    UnsupportedActivation(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

fn activation_tag(a: Activation) -> Result<u8, WeightsError> {
    match a {
        Activation::Identity => Ok(0),
        Activation::Relu => Ok(1),
        Activation::LeakyRelu(s) if s == DEFAULT_LEAKY_SLOPE => Ok(2),
        Activation::Tanh => Ok(3),
        Activation::Sigmoid => Ok(4),
        other => Err(WeightsError::UnsupportedActivation(other.name())),
    }
}

fn activation_from_tag(tag: u8) -> Option<Activation> {
    match tag {
        0 => Some(Activation::Identity),
        1 => Some(Activation::Relu),
        2 => Some(Activation::leaky()),
        3 => Some(Activation::Tanh),
        4 => Some(Activation::Sigmoid),
        _ => None,
    }
}

pub fn serialize_weights(net: &MlpNetwork, kind: NetworkKind) -> Result<Vec<u8>, WeightsError> {
    let dims = net.layer_dims();
    let mut out = Vec::with_capacity(32 + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(net.condition_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(0);
    for &a in net.activations() {
        out.push(activation_tag(a)?);
    }
    for layer in 0..net.num_layers() {
        for v in net.weight(layer).data().iter().chain(net.bias(layer).data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], WeightsError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, WeightsError> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<(MlpNetwork, NetworkKind), WeightsError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WeightsError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::VersionMismatch { found: version });
    }
    let kind_tag = r.u32()?;
    let kind = NetworkKind::from_tag(kind_tag).ok_or(WeightsError::UnknownKind(kind_tag))?;
    let condition_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    if count < 2 {
        return Err(WeightsError::InvalidHeader(format!("layer count {count} < 2")));
    }
    // Guard against absurd counts before allocating.
    if count > (bytes.len() - r.pos) / 5 + 1 {
        return Err(WeightsError::Truncated {
            offset: r.pos,
            needed: count * 5,
            available: bytes.len() - r.pos,
        });
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push(r.u32()? as usize);
    }
    let tag_offset = r.pos;
    let tags = r.take(count)?;
    if tags[0] != 0 {
        return Err(WeightsError::InvalidHeader(format!(
            "input-layer activation tag must be 0, found {}",
            tags[0]
        )));
    }
    let mut activations = Vec::with_capacity(count - 1);
    for (i, &t) in tags.iter().enumerate().skip(1) {
        activations.push(activation_from_tag(t).ok_or(WeightsError::UnknownActivation {
            offset: tag_offset + i,
            tag: t,
        })?);
    }
    let shell = MlpNetwork::new(&dims, &activations, condition_dim)
        .map_err(|e| WeightsError::InvalidHeader(e.to_string()))?;
    let mut weights = Vec::with_capacity(shell.num_layers());
    let mut biases = Vec::with_capacity(shell.num_layers());
    for layer in 0..shell.num_layers() {
        let shape = shell.weight(layer).shape().to_vec();
        let w = r.f64s(shape[0] * shape[1])?;
        let b = r.f64s(shape[0])?;
        weights.push(Tensor::new(&shape, w).expect("shape from header"));
        biases.push(Tensor::vector(&b));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
    }
    let net = MlpNetwork::from_params(&dims, &activations, condition_dim, weights, biases)
        .map_err(|e| WeightsError::InvalidHeader(e.to_string()))?;
    Ok((net, kind))
}
