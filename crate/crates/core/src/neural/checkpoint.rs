//! Binary checkpoint format for [`DenseNet`].
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "VFLNET01"
//! layers     u32
//! per layer: in u32 | out u32 | activation u8 | weights f64 × in·out (row-major) | bias f64 × out
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! Activation tags: 0 relu, 1 tanh, 2 identity, 3 softmax.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::numerics::Matrix;
use crate::{Error, Result};

use super::{Activation, DenseNet, Layer};

pub const MAGIC: &[u8; 8] = b"VFLNET01";
const CHECKSUM_LEN: usize = 32;

pub fn encode(net: &DenseNet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + net.param_count() * 8 + 9 * net.layers().len() + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        buf.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
        buf.push(layer.activation.tag());
        for v in layer.weights.data().iter().chain(&layer.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Decodes a checkpoint; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<DenseNet> {
    let bad = |detail: &str| Error::Format {
        path: origin.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(bad("checkpoint truncated"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checksum(origin.to_path_buf()));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a network checkpoint (bad magic)"));
    }
    let mut cursor = Cursor { buf: body, pos: 8 };
    let count = cursor.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let trunc = || bad(&format!("layer {i} truncated"));
        let input = cursor.u32().ok_or_else(trunc)? as usize;
        let output = cursor.u32().ok_or_else(trunc)? as usize;
        let tag = cursor.u8().ok_or_else(trunc)?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| bad(&format!("layer {i} has unknown activation tag {tag}")))?;
        let weights = cursor.f64s(input * output).ok_or_else(trunc)?;
        let bias = cursor.f64s(output).ok_or_else(trunc)?;
        layers.push(Layer::new(Matrix::new(input, output, weights)?, bias, activation)?);
    }
    if cursor.pos != body.len() {
        return Err(bad("trailing bytes after last layer"));
    }
    DenseNet::new(layers)
}

pub fn save(net: &DenseNet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DenseNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn net() -> DenseNet {
        DenseNet::init(&[3, 5, 2], Activation::Tanh, Activation::Softmax, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn round_trip() {
        let n = net();
        let back = decode(&encode(&n), Path::new("mem")).unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&net());
        assert_eq!(&bytes[..8], b"VFLNET01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
        assert_eq!(bytes[20], 1);
        let expected = 12 + 2 * 9 + 8 * (3 * 5 + 5 + 5 * 2 + 2) + 32;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&net());
        bytes[30] ^= 0x01;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Checksum(_))));
        assert!(decode(&bytes[..20], Path::new("x")).is_err());
    }
}
