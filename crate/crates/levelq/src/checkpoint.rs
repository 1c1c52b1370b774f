//! Versioned binary network container: layer table, little-endian f32
//! weights, packed mask bitmaps and optional per-layer codebooks, with a
//! trailing CRC-32.

use std::path::Path;

use crate::clustering::Codebook;
use crate::codec::crc32;
use crate::error::{LqError, Result};
use crate::layer::{ConvLayer, DenseLayer, Layer};
use crate::network::Network;
use crate::tensor::{Mask, Tensor};

pub const MAGIC: &[u8; 4] = b"LQCK";
pub const VERSION: u8 = 1;

const KIND_CONV: u8 = 0;
const KIND_DENSE: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_ADD: u8 = 4;
const KIND_SOFTMAX: u8 = 5;

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a network (weights, biases, masks, codebooks) to bytes.
pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(0);
    out.push(net.input_shape.len() as u8);
    for &d in &net.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.layers.len() as u16).to_le_bytes());

    for layer in &net.layers {
        match layer {
            Layer::Conv2d(c) => {
                out.push(KIND_CONV);
                for v in [c.in_ch, c.out_ch] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                for v in [c.kernel, c.stride, c.padding] {
                    out.extend_from_slice(&(v as u16).to_le_bytes());
                }
                push_f32s(&mut out, &c.weights.data);
                push_f32s(&mut out, &c.bias.data);
                out.extend_from_slice(&pack_bits(&c.mask.bits));
                push_codebook(&mut out, c.codebook.as_ref());
            }
            Layer::Dense(d) => {
                out.push(KIND_DENSE);
                for v in [d.in_features, d.out_features] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                push_f32s(&mut out, &d.weights.data);
                push_f32s(&mut out, &d.bias.data);
                out.extend_from_slice(&pack_bits(&d.mask.bits));
                push_codebook(&mut out, d.codebook.as_ref());
            }
            Layer::Relu => out.push(KIND_RELU),
            Layer::MaxPool { size, stride } => {
                out.push(KIND_MAXPOOL);
                out.extend_from_slice(&(*size as u16).to_le_bytes());
                out.extend_from_slice(&(*stride as u16).to_le_bytes());
            }
            Layer::Add { from } => {
                out.push(KIND_ADD);
                out.extend_from_slice(&(*from as u32).to_le_bytes());
            }
            Layer::SoftmaxLoss => out.push(KIND_SOFTMAX),
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn push_codebook(out: &mut Vec<u8>, cb: Option<&Codebook>) {
    match cb {
        None => out.push(0),
        Some(cb) => {
            out.push(1);
            out.extend_from_slice(&(cb.k() as u16).to_le_bytes());
            push_f32s(out, &cb.centroids);
            let bits: Vec<u8> = cb.frozen.iter().map(|&f| f as u8).collect();
            out.extend_from_slice(&pack_bits(&bits));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LqError::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let s = self.take(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let s = self.take(n * 4, what)?;
        Ok(s.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn read_codebook(r: &mut Reader) -> Result<Option<Codebook>> {
    if r.u8("codebook flag")? == 0 {
        return Ok(None);
    }
    let k = r.u16("codebook size")? as usize;
    let centroids = r.f32s(k, "centroids")?;
    let packed = r.take(k.div_ceil(8), "frozen flags")?;
    let frozen: Vec<bool> = unpack_bits(packed, k).into_iter().map(|b| b != 0).collect();
    Ok(Some(Codebook::new(centroids, frozen).map_err(|e| match e {
        LqError::Argument(msg) => LqError::format(0, format!("stored codebook invalid: {msg}")),
        other => other,
    })?))
}

/// Decodes a network serialized by [`encode_network`].
pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 12 {
        return Err(LqError::format(bytes.len(), "stream shorter than header + checksum"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored {
        return Err(LqError::format(bytes.len() - 4, "checksum mismatch"));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(LqError::format(0, "bad magic"));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(LqError::format(4, format!("unsupported version {version}")));
    }
    let _ = r.u8("reserved")?;
    let ndim = r.u8("input rank")? as usize;
    let mut input_shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        input_shape.push(r.u32("input dim")? as usize);
    }
    let layer_count = r.u16("layer count")? as usize;

    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let kind = r.u8("layer kind")?;
        let layer = match kind {
            KIND_CONV => {
                let in_ch = r.u32("in channels")? as usize;
                let out_ch = r.u32("out channels")? as usize;
                let kernel = r.u16("kernel")? as usize;
                let stride = r.u16("stride")? as usize;
                let padding = r.u16("padding")? as usize;
                let n = out_ch * in_ch * kernel * kernel;
                let shape = vec![out_ch, in_ch, kernel, kernel];
                let weights = Tensor::new(shape.clone(), r.f32s(n, "conv weights")?)
                    .map_err(|_| LqError::format(r.pos, "conv weight count"))?;
                let bias = Tensor::new(vec![out_ch], r.f32s(out_ch, "conv bias")?)
                    .map_err(|_| LqError::format(r.pos, "conv bias count"))?;
                let packed = r.take(n.div_ceil(8), "conv mask")?;
                let mask = Mask { shape, bits: unpack_bits(packed, n) };
                let codebook = read_codebook(&mut r)?;
                Layer::Conv2d(ConvLayer { in_ch, out_ch, kernel, stride, padding, weights, bias, mask, codebook })
            }
            KIND_DENSE => {
                let in_features = r.u32("in features")? as usize;
                let out_features = r.u32("out features")? as usize;
                let n = in_features * out_features;
                let shape = vec![out_features, in_features];
                let weights = Tensor::new(shape.clone(), r.f32s(n, "dense weights")?)
                    .map_err(|_| LqError::format(r.pos, "dense weight count"))?;
                let bias = Tensor::new(vec![out_features], r.f32s(out_features, "dense bias")?)
                    .map_err(|_| LqError::format(r.pos, "dense bias count"))?;
                let packed = r.take(n.div_ceil(8), "dense mask")?;
                let mask = Mask { shape, bits: unpack_bits(packed, n) };
                let codebook = read_codebook(&mut r)?;
                Layer::Dense(DenseLayer { in_features, out_features, weights, bias, mask, codebook })
            }
            KIND_RELU => Layer::Relu,
            KIND_MAXPOOL => {
                let size = r.u16("pool size")? as usize;
                let stride = r.u16("pool stride")? as usize;
                Layer::MaxPool { size, stride }
            }
            KIND_ADD => Layer::Add { from: r.u32("add source")? as usize },
            KIND_SOFTMAX => Layer::SoftmaxLoss,
            other => {
                return Err(LqError::format(r.pos - 1, format!("layer {l}: unknown kind {other}")))
            }
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(LqError::format(r.pos, "trailing bytes after last layer"));
    }
    Network::new(input_shape, layers)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_network(net))?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path)
        .map_err(|e| LqError::argument(format!("cannot read {}: {e}", path.display())))?;
    decode_network(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = arch::by_name("light-cnn", &[3, 32, 32], 10, 11).unwrap();
        let bytes = encode_network(&net);
        let back = decode_network(&bytes).unwrap();
        assert_eq!(net.layers.len(), back.layers.len());
        for (a, b) in net.layers.iter().zip(&back.layers) {
            match (a.params(), b.params()) {
                (Some((wa, ba, ma)), Some((wb, bb, mb))) => {
                    let ab: Vec<u32> = wa.data.iter().map(|v| v.to_bits()).collect();
                    let bb_: Vec<u32> = wb.data.iter().map(|v| v.to_bits()).collect();
                    assert_eq!(ab, bb_);
                    assert_eq!(ba.data, bb.data);
                    assert_eq!(ma.bits, mb.bits);
                }
                (None, None) => {}
                _ => panic!("layer kind mismatch"),
            }
        }
        // Re-encoding reproduces the byte stream exactly.
        assert_eq!(bytes, encode_network(&back));
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let net = arch::by_name("mlp", &[4], 3, 2).unwrap();
        let mut bytes = encode_network(&net);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(decode_network(&bytes), Err(LqError::Format { .. })));
        assert!(matches!(decode_network(&bytes[..8]), Err(LqError::Format { .. })));
    }
}
