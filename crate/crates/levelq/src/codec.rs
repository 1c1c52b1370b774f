//! Bit-exact serialization of quantized models.
//!
//! Weights are stored as packed b-bit codewords into a per-layer codebook.
//! Codeword 0 is reserved for the zero centroid; non-zero centroids take
//! codewords `1..` in ascending value order, so `2^(b-1)` non-zero centroids
//! plus zero fit in b bits. Packing is LSB-first within bytes, little-endian
//! throughout, with a trailing CRC-32.
//!
//! Layout:
//!
//! ```text
//! magic "LQEM" | version u8 | bits u8 | flags u8 | 0u8 | layer_count u32
//! per layer:
//!   n_weights u32 | nz_count u16 | layer_flags u8 (bit0 = has zero) | 0u8
//!   non-zero centroids: nz_count * f32
//!   packed indices: ceil(n_weights * bits / 8) bytes
//! crc32 u32 over everything above
//! ```

use crate::error::{LqError, Result};
use crate::network::Network;
use crate::quantizer::{verify_quantized, QuantState};

pub const MAGIC: &[u8; 4] = b"LQEM";
pub const VERSION: u8 = 1;

/// Number of centroids a b-bit code addresses: `2^(b-1) + 1`
/// (a dedicated zero codeword plus `2^(b-1)` non-zero values).
pub fn centroid_count(bits: u32) -> Result<usize> {
    if bits < 2 {
        return Err(LqError::argument("bit width must be at least 2"));
    }
    Ok((1usize << (bits - 1)) + 1)
}

// ── crc32 (IEEE) ──────────────────────────────────────────────────────

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

// ── bit packing ───────────────────────────────────────────────────────

/// Packs each index into `bits` bits, LSB-first within bytes.
pub fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let total_bits = indices.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut pos = 0usize;
    for &idx in indices {
        for b in 0..bits {
            if idx >> b & 1 != 0 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_indices`].
pub fn unpack_indices(bytes: &[u8], count: usize, bits: u32) -> Result<Vec<u32>> {
    let need = (count * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(LqError::format(bytes.len(), "index stream truncated"));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut idx = 0u32;
        for b in 0..bits {
            if bytes[pos / 8] >> (pos % 8) & 1 != 0 {
                idx |= 1 << b;
            }
            pos += 1;
        }
        out.push(idx);
    }
    Ok(out)
}

// ── encoding ──────────────────────────────────────────────────────────

/// Serializes a fully quantized model. Fails if any weight is off its
/// codebook or a codebook does not fit the bit width.
pub fn encode_model(net: &Network, state: &QuantState, bits: u32) -> Result<Vec<u8>> {
    let violations = verify_quantized(net, state);
    if let Some(v) = violations.first() {
        return Err(LqError::state(format!(
            "cannot encode an incompletely quantized model: layer {} {} ({} violations)",
            v.layer,
            v.detail,
            violations.len()
        )));
    }
    let max_nonzero = 1usize << (bits - 1);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(u8::try_from(bits).map_err(|_| LqError::argument("bit width too large"))?);
    let weighted = net.weighted_indices();
    let mut any_missing_zero = false;
    let flags_pos = out.len();
    out.push(0); // global flags, patched below
    out.push(0);
    out.extend_from_slice(&(weighted.len() as u32).to_le_bytes());

    for li in weighted {
        let lq = state
            .layers
            .get(&li)
            .ok_or_else(|| LqError::state(format!("layer {li} has no quantization state")))?;
        let (w, _, _) = net.layers[li].params().expect("weighted");
        let has_zero = lq.codebook.centroids.iter().any(|&c| c == 0.0);
        let nonzero: Vec<f32> = lq.codebook.centroids.iter().copied().filter(|&c| c != 0.0).collect();
        if nonzero.len() > max_nonzero {
            return Err(LqError::state(format!(
                "layer {li}: {} non-zero centroids exceed the {bits}-bit budget of {max_nonzero}",
                nonzero.len()
            )));
        }
        if !has_zero {
            any_missing_zero = true;
        }

        out.extend_from_slice(&(w.len() as u32).to_le_bytes());
        out.extend_from_slice(&(nonzero.len() as u16).to_le_bytes());
        out.push(has_zero as u8);
        out.push(0);
        for c in &nonzero {
            out.extend_from_slice(&c.to_le_bytes());
        }

        let indices: Vec<u32> = w
            .data
            .iter()
            .map(|&v| {
                if v == 0.0 && has_zero {
                    0u32
                } else {
                    let j = nonzero
                        .iter()
                        .position(|&c| c.to_bits() == v.to_bits())
                        .expect("verified: weight is a centroid");
                    (j + 1) as u32
                }
            })
            .collect();
        out.extend_from_slice(&pack_indices(&indices, bits));
    }

    out[flags_pos] = any_missing_zero as u8;
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// A decoded layer: its codebook and the reconstructed weight values.
#[derive(Debug, Clone)]
pub struct DecodedLayer {
    pub n_weights: usize,
    pub has_zero: bool,
    pub nonzero_centroids: Vec<f32>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DecodedModel {
    pub bits: u32,
    pub layers: Vec<DecodedLayer>,
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

    fn f32(&mut self, what: &str) -> Result<f32> {
        let s = self.take(4, what)?;
        Ok(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

/// Exact inverse of [`encode_model`]. Every validation failure names the
/// byte offset it was detected at; malformed input never panics.
pub fn decode_model(bytes: &[u8]) -> Result<DecodedModel> {
    if bytes.len() < 16 {
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
    let bits = r.u8("bit width")? as u32;
    if !(2..=16).contains(&bits) {
        return Err(LqError::format(5, format!("bit width {bits} out of range")));
    }
    let _flags = r.u8("flags")?;
    let _ = r.u8("reserved")?;
    let layer_count = r.u32("layer count")? as usize;
    let max_nonzero = 1usize << (bits - 1);

    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let n_weights = r.u32("weight count")? as usize;
        let nz = r.u16("codebook size")? as usize;
        if nz > max_nonzero {
            return Err(LqError::format(
                r.pos - 2,
                format!("layer {l}: codebook of {nz} exceeds {bits}-bit budget"),
            ));
        }
        let layer_flags = r.u8("layer flags")?;
        let _ = r.u8("reserved")?;
        let has_zero = layer_flags & 1 != 0;
        let mut nonzero = Vec::with_capacity(nz);
        for i in 0..nz {
            let c = r.f32("centroid")?;
            if !c.is_finite() || c == 0.0 {
                return Err(LqError::format(r.pos - 4, format!("layer {l}: invalid centroid {i}")));
            }
            nonzero.push(c);
        }
        let stream_start = r.pos;
        let stream = r.take((n_weights * bits as usize).div_ceil(8), "index stream")?;
        let indices = unpack_indices(stream, n_weights, bits)?;
        let fallback_zero = if has_zero {
            0.0f32
        } else {
            // Flagged layers without a zero centroid map codeword 0 to the
            // smallest-magnitude centroid.
            nonzero
                .iter()
                .copied()
                .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap_or(0.0)
        };
        let mut weights = Vec::with_capacity(n_weights);
        for (i, &idx) in indices.iter().enumerate() {
            let v = match idx as usize {
                0 => fallback_zero,
                j if j <= nonzero.len() => nonzero[j - 1],
                j => {
                    return Err(LqError::format(
                        stream_start + (i * bits as usize) / 8,
                        format!("layer {l}: codeword {j} has no centroid"),
                    ))
                }
            };
            weights.push(v);
        }
        layers.push(DecodedLayer { n_weights, has_zero, nonzero_centroids: nonzero, weights });
    }
    if r.pos != body.len() {
        return Err(LqError::format(r.pos, "trailing bytes after last layer"));
    }
    Ok(DecodedModel { bits, layers })
}

// ── compression accounting ────────────────────────────────────────────

/// `32 W / (b W + codebook bits)`, with the codebook counted as one full
/// non-zero table (`2^(b-1)` f32 entries) per weighted layer when included.
pub fn compression_ratio_for_counts(layer_weights: &[usize], bits: u32, include_codebook: bool) -> Result<f64> {
    if bits < 2 {
        return Err(LqError::argument("bit width must be at least 2"));
    }
    let total: usize = layer_weights.iter().sum();
    if total == 0 {
        return Err(LqError::argument("no weights to account for"));
    }
    let mut denom = bits as f64 * total as f64;
    if include_codebook {
        denom += (layer_weights.len() * (1usize << (bits - 1)) * 32) as f64;
    }
    Ok(32.0 * total as f64 / denom)
}

/// Compression ratio of a network at bit width `bits`.
pub fn compression_ratio(net: &Network, bits: u32, include_codebook: bool) -> Result<f64> {
    let counts: Vec<usize> = net
        .weighted_indices()
        .iter()
        .map(|&li| net.layers[li].params().expect("weighted").0.len())
        .collect();
    compression_ratio_for_counts(&counts, bits, include_codebook)
}

/// Human-readable dump of an encoded model's header and codebooks.
pub fn inspect_dump(bytes: &[u8]) -> Result<String> {
    use std::fmt::Write as _;
    let model = decode_model(bytes)?;
    let mut s = String::new();
    let _ = writeln!(s, "encoded model: {} bytes, {}-bit codewords", bytes.len(), model.bits);
    let _ = writeln!(s, "layers: {}", model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "layer {i}: {} weights, zero codeword -> {}",
            layer.n_weights,
            if layer.has_zero { "0".to_string() } else { "smallest-magnitude centroid".to_string() }
        );
        let centroids: Vec<String> =
            layer.nonzero_centroids.iter().map(|c| format!("{c:.6}")).collect();
        let _ = writeln!(s, "  codebook[{}]: {}", centroids.len(), centroids.join(", "));
    }
    Ok(s)
}
