//! Binary checkpoints.
//!
//! Layout, little-endian:
//! `"GPFC"`, `u32` version, 32-byte architecture digest, `u32` header length,
//! header JSON (`{"model": ModelConfig, "edges": [[i, j], ...],
//! "output_offset_mm": [...]}`), `u32`
//! tensor count, then per tensor: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, `f32` values. Tensors appear in registry order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{architecture_digest, Network};
use super::ModelError;
use crate::scalar::{lit, to_f64, Scalar};
use crate::skeleton::SkeletonGraph;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GPFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    edges: Vec<(usize, usize)>,
    output_offset_mm: Vec<f64>,
}

fn decode_hex(s: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    out
}

fn encode_hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

pub fn encode_checkpoint<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let header = Header {
        model: net.config().clone(),
        edges: net.graph().edges().to_vec(),
        output_offset_mm: net.output_offset_mm().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&decode_hex(&net.digest()));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint. When `expected` is given, its digest must match the
/// stored one unless `force` is set; a stored digest that disagrees with the
/// stored header is likewise rejected unless forced.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&str>, force: bool) -> Result<Network<T>, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let stored = encode_hex(r.take(32)?);
    let len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let actual = architecture_digest(&header.model, &header.edges);
    if !force {
        if actual != stored {
            return Err(ModelError::DigestMismatch { expected: stored, found: actual });
        }
        if let Some(exp) = expected {
            if exp != stored {
                return Err(ModelError::DigestMismatch {
                    expected: exp.to_string(),
                    found: stored,
                });
            }
        }
    }
    let graph = SkeletonGraph::new(header.model.joints, &header.edges)?;
    let mut net = Network::<T>::build(header.model, graph)?;
    net.set_output_offset_mm(header.output_offset_mm)
        .map_err(|_| ModelError::Checkpoint("bad output offset".into()))?;
    let count = r.u32()?;
    if count != net.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            net.params().len()
        )));
    }
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| ModelError::Checkpoint("non-UTF-8 tensor name".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let param = net.params().param(id);
        if param.name != name || param.value.shape() != shape.as_slice() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} {shape:?} does not match {} {:?}",
                param.name,
                param.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let dst = net.params_mut().get_mut(id);
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(ModelError::Checkpoint(format!("non-finite value in {name}")));
            }
            *d = lit(v as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(net)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, expected: Option<&str>, force: bool) -> Result<Network<T>, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes, expected, force)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network<f32> {
        let c = ModelConfig::tiny();
        let g = SkeletonGraph::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        Network::new(c, g, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact_in_f32() {
        let net = tiny();
        let back: Network<f32> = decode_checkpoint(&encode_checkpoint(&net), Some(&net.digest()), false).unwrap();
        for (a, b) in net.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(net.output_offset_mm(), back.output_offset_mm());
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let net = tiny();
        let bytes = encode_checkpoint(&net);
        let other = "0".repeat(64);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Some(&other), false),
            Err(ModelError::DigestMismatch { .. })
        ));
        assert!(decode_checkpoint::<f32>(&bytes, Some(&other), true).is_ok());
    }

    #[test]
    fn corruption_is_reported() {
        let mut bytes = encode_checkpoint(&tiny());
        bytes[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bytes, None, false).is_err());
        let bytes = encode_checkpoint(&tiny());
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], None, false).is_err());
    }
}
