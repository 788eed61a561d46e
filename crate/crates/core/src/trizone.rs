//! Mixed-bit packed storage for one `(layer, head)` and the decode step that reads it.
//!
//! * Zone A holds every kept token's K (channels grouped into 2/4/8-bit packed
//!   segments plus an unpacked 16-bit group) and the V rows quantized to 2, 4 or 8 bits.
//! * Zone B holds full-precision V rows of kept tokens allocated 16 bits.
//! * Zone C holds full-precision K and V of tokens appended during decode.
//!
//! Packing is little-endian within a byte: 2-bit codes sit at bit offsets
//! 0, 2, 4, 6 and 4-bit codes at 0, 4.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{dot_f64, softmax_in_place};
use crate::error::{shape_err, RdkvError, Result};
use crate::pipeline::{HeadAllocation, KeptSets, ModelAllocation};
use crate::quantizer::{quantize_unit, reconstruct_unit, QuantParams};

pub const PACKED_MAGIC: &[u8; 8] = b"RDKVP001";

/// Bit-widths that are stored packed.
const PACKED_WIDTHS: [u8; 3] = [2, 4, 8];

/// Entries per row after padding to a whole number of bytes.
pub fn padded_len(bits: u8, len: usize) -> usize {
    let per_byte = (8 / bits) as usize;
    len.div_ceil(per_byte) * per_byte
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if PACKED_WIDTHS.contains(&bits) {
        Ok(())
    } else {
        Err(RdkvError::InvalidArgument(format!(
            "packing supports 2, 4 or 8 bits, got {bits}"
        )))
    }
}

/// Packs codes into bytes; the tail of the last byte is zero-filled.
pub fn pack_bits(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let max = (1u16 << bits) - 1;
    if let Some(&c) = codes.iter().find(|&&c| c as u16 > max) {
        return Err(RdkvError::CodeOverflow { code: c as u32, bits });
    }
    let per_byte = (8 / bits) as usize;
    Ok(codes
        .chunks(per_byte)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, &c)| byte | (c << (i * bits as usize)))
        })
        .collect())
}

/// Unpacks the first `len` codes.
pub fn unpack_bits(bytes: &[u8], bits: u8, len: usize) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let mut out = vec![0; len];
    unpack_into(bytes, bits, &mut out)?;
    Ok(out)
}

fn unpack_into(bytes: &[u8], bits: u8, out: &mut [u8]) -> Result<()> {
    let per_byte = (8 / bits) as usize;
    let needed = out.len().div_ceil(per_byte);
    if bytes.len() < needed {
        return Err(RdkvError::Truncated {
            expected: needed,
            found: bytes.len(),
        });
    }
    let mask = ((1u16 << bits) - 1) as u8;
    for (i, o) in out.iter_mut().enumerate() {
        let shift = (i % per_byte) * bits as usize;
        *o = (bytes[i / per_byte] >> shift) & mask;
    }
    Ok(())
}

/// A run of uniformly packed rows. Every row carries `logical_len` codes plus
/// `pad_count` padding codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSegment {
    pub bits: u8,
    pub rows: usize,
    pub logical_len: usize,
    pub pad_count: usize,
    /// One entry per V row, or one per (padded) K channel.
    pub params: Vec<QuantParams>,
    pub payload: Vec<u8>,
}

impl PackedSegment {
    pub fn row_bytes(&self) -> usize {
        (self.logical_len + self.pad_count) * self.bits as usize / 8
    }

    fn row(&self, r: usize) -> &[u8] {
        let n = self.row_bytes();
        &self.payload[r * n..(r + 1) * n]
    }

    /// Packs `rows` rows of `codes` (each `logical_len` long).
    fn from_rows(bits: u8, codes: &[Vec<u8>], logical_len: usize, params: Vec<QuantParams>) -> Result<Self> {
        let padded = padded_len(bits, logical_len);
        let mut payload = Vec::with_capacity(codes.len() * padded * bits as usize / 8);
        let mut row = vec![0u8; padded];
        for r in codes {
            row[..logical_len].copy_from_slice(r);
            row[logical_len..].fill(0);
            payload.extend(pack_bits(&row, bits)?);
        }
        Ok(Self {
            bits,
            rows: codes.len(),
            logical_len,
            pad_count: padded - logical_len,
            params,
            payload,
        })
    }

    fn validate(&self) -> Result<()> {
        check_pack_bits(self.bits)?;
        if padded_len(self.bits, self.logical_len) != self.logical_len + self.pad_count {
            return Err(RdkvError::Format("segment padding violates alignment".into()));
        }
        if self.payload.len() != self.rows * self.row_bytes() {
            return Err(RdkvError::Format("segment payload size mismatch".into()));
        }
        Ok(())
    }
}

/// Packed V rows of one bit-width, with the tokens they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct VSegment {
    pub tokens: Vec<usize>,
    pub packed: PackedSegment,
}

/// Packed K columns of one bit-width, with the channels they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct KSegment {
    pub channels: Vec<usize>,
    pub packed: PackedSegment,
}

/// Byte accounting of a packed head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    /// Packed Zone A bytes, padding included.
    pub zone_a_packed_bytes: usize,
    /// Full-precision scalars (16-bit K channels, Zone B, Zone C) at 2 bytes each.
    pub full_precision_bytes: usize,
    pub padding_bits: usize,
    /// Scales, zero-points, permutation and index maps.
    pub metadata_bytes: usize,
}

impl StorageReport {
    /// Payload bits excluding padding; equals the allocated bits before any append.
    pub fn allocated_bits(&self) -> usize {
        8 * (self.zone_a_packed_bytes + self.full_precision_bytes) - self.padding_bits
    }
}

/// Three-zone packed cache of one `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriZoneCache {
    head_dim: usize,
    seq_len: usize,
    /// Kept tokens in ascending order; row order of every K segment.
    kept: Vec<usize>,
    v_segments: Vec<VSegment>,
    k_segments: Vec<KSegment>,
    /// 16-bit K channels, stored `[kept × channels]`.
    k_full_channels: Vec<usize>,
    k_full: Vec<f32>,
    /// Kept channels in storage order: 2-bit, 4-bit, 8-bit, then 16-bit.
    permutation: Vec<usize>,
    zone_b_tokens: Vec<usize>,
    zone_b: Vec<f32>,
    new_keys: Vec<f32>,
    new_values: Vec<f32>,
}

fn check_allocation(alloc: &HeadAllocation, seq_len: usize, head_dim: usize) -> Result<()> {
    if alloc.v_bits.len() != seq_len || alloc.k_bits.len() != head_dim {
        return shape_err(format!(
            "allocation covers {} tokens × {} channels, cache has {seq_len} × {head_dim}",
            alloc.v_bits.len(),
            alloc.k_bits.len()
        ));
    }
    let valid = |b: &u8| matches!(b, 0 | 2 | 4 | 8 | 16);
    if !alloc.v_bits.iter().all(valid) || !alloc.k_bits.iter().all(valid) {
        return Err(RdkvError::InvalidArgument(
            "allocation holds unsupported bit-widths".into(),
        ));
    }
    if KeptSets::from_bits(&alloc.v_bits) != alloc.kept {
        return Err(RdkvError::InvalidArgument(
            "kept sets disagree with V bit-widths".into(),
        ));
    }
    Ok(())
}

fn column(rows: &[f32], head_dim: usize, tokens: &[usize], c: usize) -> Vec<f32> {
    tokens.iter().map(|&t| rows[t * head_dim + c]).collect()
}

impl TriZoneCache {
    /// Quantizes and packs one head's keys and values `[T × d]` under `alloc`.
    pub fn build(keys: &[f32], values: &[f32], head_dim: usize, alloc: &HeadAllocation) -> Result<Self> {
        if head_dim == 0 || keys.len() % head_dim != 0 || keys.len() != values.len() {
            return shape_err("keys and values must both be [T × d]");
        }
        let seq_len = keys.len() / head_dim;
        check_allocation(alloc, seq_len, head_dim)?;
        let kept = alloc.kept.kept.clone();

        let mut v_segments = Vec::new();
        for bits in PACKED_WIDTHS {
            let tokens: Vec<usize> = kept.iter().copied().filter(|&t| alloc.v_bits[t] == bits).collect();
            if tokens.is_empty() {
                continue;
            }
            let mut codes = Vec::with_capacity(tokens.len());
            let mut params = Vec::with_capacity(tokens.len());
            for &t in &tokens {
                let (c, p) = quantize_unit(&values[t * head_dim..(t + 1) * head_dim], bits)?;
                codes.push(c);
                params.push(p);
            }
            let packed = PackedSegment::from_rows(bits, &codes, head_dim, params)?;
            v_segments.push(VSegment { tokens, packed });
        }

        let zone_b_tokens = alloc.kept.v16.clone();
        let zone_b = zone_b_tokens
            .iter()
            .flat_map(|&t| values[t * head_dim..(t + 1) * head_dim].iter().copied())
            .collect();

        let mut k_segments = Vec::new();
        let mut permutation = Vec::new();
        if !kept.is_empty() {
            for bits in PACKED_WIDTHS {
                let channels: Vec<usize> = (0..head_dim).filter(|&c| alloc.k_bits[c] == bits).collect();
                if channels.is_empty() {
                    continue;
                }
                let padded = padded_len(bits, channels.len());
                let mut params = Vec::with_capacity(padded);
                let mut by_channel = Vec::with_capacity(channels.len());
                for &c in &channels {
                    let (codes, p) = quantize_unit(&column(keys, head_dim, &kept, c), bits)?;
                    by_channel.push(codes);
                    params.push(p);
                }
                params.resize(padded, QuantParams::padding(bits));
                let rows: Vec<Vec<u8>> = (0..kept.len())
                    .map(|r| by_channel.iter().map(|col| col[r]).collect())
                    .collect();
                let packed = PackedSegment::from_rows(bits, &rows, channels.len(), params)?;
                permutation.extend(&channels);
                k_segments.push(KSegment { channels, packed });
            }
        }
        let k_full_channels: Vec<usize> = if kept.is_empty() {
            Vec::new()
        } else {
            (0..head_dim).filter(|&c| alloc.k_bits[c] == 16).collect()
        };
        permutation.extend(&k_full_channels);
        let k_full = kept
            .iter()
            .flat_map(|&t| k_full_channels.iter().map(move |&c| keys[t * head_dim + c]))
            .collect();

        Ok(Self {
            head_dim,
            seq_len,
            kept,
            v_segments,
            k_segments,
            k_full_channels,
            k_full,
            permutation,
            zone_b_tokens,
            zone_b,
            new_keys: Vec::new(),
            new_values: Vec::new(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn v_segments(&self) -> &[VSegment] {
        &self.v_segments
    }

    pub fn k_segments(&self) -> &[KSegment] {
        &self.k_segments
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn zone_b_tokens(&self) -> &[usize] {
        &self.zone_b_tokens
    }

    pub fn zone_c_len(&self) -> usize {
        self.new_keys.len() / self.head_dim
    }

    /// Appends one decode token's K and V to Zone C.
    pub fn append(&mut self, key: &[f32], value: &[f32]) -> Result<()> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return shape_err(format!(
                "appended key/value must have length {}",
                self.head_dim
            ));
        }
        self.new_keys.extend_from_slice(key);
        self.new_values.extend_from_slice(value);
        Ok(())
    }

    /// `qᵀk̂_t` for every kept token via `Σ (s_c q_c)·code - Σ s_c z_c q_c`,
    /// never materializing dequantized keys. Unscaled by `1/√d`.
    pub fn fused_k_logits(&self, q: &[f32]) -> Result<Vec<f64>> {
        if q.len() != self.head_dim {
            return shape_err("query length differs from head_dim");
        }
        let permuted: Vec<f64> = self.permutation.iter().map(|&c| q[c] as f64).collect();
        let mut logits = vec![0.0; self.kept.len()];
        let mut offset = 0;
        let mut codes = Vec::new();
        for seg in &self.k_segments {
            let p = &seg.packed;
            let width = p.logical_len + p.pad_count;
            // Padded channels have s = z = 0; their query slot is zero as well.
            let mut scaled = vec![0.0; width];
            let mut bias = 0.0;
            for (j, params) in p.params.iter().enumerate().take(p.logical_len) {
                let qc = permuted[offset + j];
                scaled[j] = params.scale as f64 * qc;
                bias += params.scale as f64 * params.zero_point as f64 * qc;
            }
            codes.resize(width, 0);
            for (r, logit) in logits.iter_mut().enumerate() {
                unpack_into(p.row(r), p.bits, &mut codes)?;
                let acc: f64 = scaled.iter().zip(&codes).map(|(s, &c)| s * c as f64).sum();
                *logit += acc - bias;
            }
            offset += p.logical_len;
        }
        let n16 = self.k_full_channels.len();
        if n16 > 0 {
            let q16 = &permuted[offset..];
            for (logit, row) in logits.iter_mut().zip(self.k_full.chunks_exact(n16)) {
                *logit += row.iter().zip(q16).map(|(&k, &qc)| k as f64 * qc).sum::<f64>();
            }
        }
        Ok(logits)
    }

    /// Dequantized kept keys `[kept × d]` in original channel order; dropped channels are zero.
    pub fn dequantized_keys(&self) -> Result<Vec<f32>> {
        let d = self.head_dim;
        let mut out = vec![0.0f32; self.kept.len() * d];
        let mut codes = Vec::new();
        for seg in &self.k_segments {
            let p = &seg.packed;
            codes.resize(p.logical_len + p.pad_count, 0);
            for r in 0..self.kept.len() {
                unpack_into(p.row(r), p.bits, &mut codes)?;
                for (j, &c) in seg.channels.iter().enumerate() {
                    out[r * d + c] = p.params[j].dequantize(codes[j] as u32) as f32;
                }
            }
        }
        let n16 = self.k_full_channels.len();
        if n16 > 0 {
            for (r, row) in self.k_full.chunks_exact(n16).enumerate() {
                for (&c, &k) in self.k_full_channels.iter().zip(row) {
                    out[r * d + c] = k;
                }
            }
        }
        Ok(out)
    }

    /// Dequantized kept values `[kept × d]` from Zones A and B.
    pub fn dequantized_values(&self) -> Result<Vec<f32>> {
        let d = self.head_dim;
        let mut out = vec![0.0f32; self.kept.len() * d];
        let mut codes = Vec::new();
        for seg in &self.v_segments {
            let p = &seg.packed;
            codes.resize(p.logical_len + p.pad_count, 0);
            for (r, &t) in seg.tokens.iter().enumerate() {
                let pos = self.kept_pos(t)?;
                unpack_into(p.row(r), p.bits, &mut codes)?;
                for (o, &c) in out[pos * d..(pos + 1) * d].iter_mut().zip(&codes) {
                    *o = p.params[r].dequantize(c as u32) as f32;
                }
            }
        }
        for (r, &t) in self.zone_b_tokens.iter().enumerate() {
            let pos = self.kept_pos(t)?;
            out[pos * d..(pos + 1) * d].copy_from_slice(&self.zone_b[r * d..(r + 1) * d]);
        }
        Ok(out)
    }

    fn kept_pos(&self, token: usize) -> Result<usize> {
        self.kept
            .binary_search(&token)
            .map_err(|_| RdkvError::Format(format!("token {token} is not in the kept set")))
    }

    /// One decode step: a single softmax over kept and appended tokens, and the
    /// output summed from quantized V (Zone A), full-precision V (Zone B) and new V (Zone C).
    pub fn decode_step(&self, q: &[f32]) -> Result<Vec<f64>> {
        let d = self.head_dim;
        let n_new = self.zone_c_len();
        if self.kept.is_empty() && n_new == 0 {
            return Err(RdkvError::Numeric(
                "softmax over an empty cache is undefined".into(),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut logits = self.fused_k_logits(q)?;
        logits.extend(self.new_keys.chunks_exact(d).map(|k| dot_f64(q, k)));
        logits.iter_mut().for_each(|z| *z *= scale);
        softmax_in_place(&mut logits);
        let (old, new) = logits.split_at(self.kept.len());

        let mut out = vec![0.0f64; d];
        let mut codes = Vec::new();
        for seg in &self.v_segments {
            let p = &seg.packed;
            codes.resize(p.logical_len + p.pad_count, 0);
            for (r, &t) in seg.tokens.iter().enumerate() {
                let a = old[self.kept_pos(t)?];
                unpack_into(p.row(r), p.bits, &mut codes)?;
                let params = &p.params[r];
                for (o, &c) in out.iter_mut().zip(&codes[..d]) {
                    *o += a * params.dequantize(c as u32);
                }
            }
        }
        for (r, &t) in self.zone_b_tokens.iter().enumerate() {
            let a = old[self.kept_pos(t)?];
            for (o, &v) in out.iter_mut().zip(&self.zone_b[r * d..(r + 1) * d]) {
                *o += a * v as f64;
            }
        }
        for (&a, v) in new.iter().zip(self.new_values.chunks_exact(d)) {
            for (o, &x) in out.iter_mut().zip(v) {
                *o += a * x as f64;
            }
        }
        Ok(out)
    }

    pub fn storage(&self) -> StorageReport {
        let mut packed = 0;
        let mut padding_bits = 0;
        let mut params = 0;
        for p in self
            .v_segments
            .iter()
            .map(|s| &s.packed)
            .chain(self.k_segments.iter().map(|s| &s.packed))
        {
            packed += p.payload.len();
            padding_bits += p.rows * p.pad_count * p.bits as usize;
            params += p.params.len();
        }
        let full_scalars = self.k_full.len() + self.zone_b.len() + self.new_keys.len() + self.new_values.len();
        let index_entries = self.kept.len()
            + self.permutation.len()
            + self.zone_b_tokens.len()
            + self.v_segments.iter().map(|s| s.tokens.len()).sum::<usize>();
        StorageReport {
            zone_a_packed_bytes: packed,
            full_precision_bytes: 2 * full_scalars,
            padding_bits,
            metadata_bytes: params * 8 + index_entries * 4,
        }
    }
}

/// Dense `(K̂, V̂)` of the kept tokens `[kept × d]`, obtained by quantizing and
/// dequantizing each unit directly, without going through the packed layout.
pub fn dense_reconstruction(
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
    alloc: &HeadAllocation,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if head_dim == 0 || keys.len() != values.len() || keys.len() % head_dim != 0 {
        return shape_err("keys and values must both be [T × d]");
    }
    check_allocation(alloc, keys.len() / head_dim, head_dim)?;
    let kept = &alloc.kept.kept;
    let d = head_dim;
    let mut v_hat = Vec::with_capacity(kept.len() * d);
    for &t in kept {
        v_hat.extend(reconstruct_unit(&values[t * d..(t + 1) * d], alloc.v_bits[t])?);
    }
    let mut k_hat = vec![0.0f32; kept.len() * d];
    if !kept.is_empty() {
        for c in 0..d {
            let col = reconstruct_unit(&column(keys, d, kept, c), alloc.k_bits[c])?;
            for (r, x) in col.into_iter().enumerate() {
                k_hat[r * d + c] = x;
            }
        }
    }
    Ok((k_hat, v_hat))
}

/// Plain softmax attention of one query over `[n × d]` keys and values.
pub fn dense_attention(q: &[f32], keys: &[f32], values: &[f32], head_dim: usize) -> Result<Vec<f64>> {
    let n = keys.len() / head_dim;
    if n == 0 {
        return Err(RdkvError::Numeric(
            "softmax over an empty cache is undefined".into(),
        ));
    }
    let attn = crate::cache::attention_probe(q, keys, head_dim, &[n - 1])?;
    crate::cache::attention_output(&attn, values, head_dim)
}

// ---------------------------------------------------------------------------
// RDKVP001 container: magic, u32 LE manifest length, JSON manifest, payload blob.

#[derive(Debug, Serialize, Deserialize)]
struct PackedManifest {
    version: u32,
    payload_bytes: usize,
    payload_sha256: String,
    heads: Vec<HeadManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadManifest {
    layer: usize,
    head: usize,
    head_dim: usize,
    seq_len: usize,
    kept: Vec<usize>,
    permutation: Vec<usize>,
    v_segments: Vec<SegmentManifest>,
    k_segments: Vec<SegmentManifest>,
    k_full_channels: Vec<usize>,
    k_full: BlobRef,
    zone_b_tokens: Vec<usize>,
    zone_b: BlobRef,
    zone_c_len: usize,
    zone_c_keys: BlobRef,
    zone_c_values: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentManifest {
    bits: u8,
    /// Tokens for V segments, channels for K segments.
    index: Vec<usize>,
    rows: usize,
    logical_len: usize,
    pad_count: usize,
    scales: Vec<f32>,
    zero_points: Vec<u32>,
    payload: BlobRef,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    len: usize,
}

struct BlobWriter(Vec<u8>);

impl BlobWriter {
    fn bytes(&mut self, b: &[u8]) -> BlobRef {
        let r = BlobRef {
            offset: self.0.len(),
            len: b.len(),
        };
        self.0.extend_from_slice(b);
        r
    }

    fn floats(&mut self, f: &[f32]) -> BlobRef {
        let bytes: Vec<u8> = f.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.bytes(&bytes)
    }
}

fn blob<'a>(payload: &'a [u8], r: BlobRef) -> Result<&'a [u8]> {
    payload
        .get(r.offset..r.offset + r.len)
        .ok_or_else(|| RdkvError::Format("manifest points outside the payload".into()))
}

fn blob_floats(payload: &[u8], r: BlobRef) -> Result<Vec<f32>> {
    let b = blob(payload, r)?;
    if b.len() % 4 != 0 {
        return Err(RdkvError::Format("float blob length not a multiple of 4".into()));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn segment_manifest(index: &[usize], p: &PackedSegment, w: &mut BlobWriter) -> SegmentManifest {
    SegmentManifest {
        bits: p.bits,
        index: index.to_vec(),
        rows: p.rows,
        logical_len: p.logical_len,
        pad_count: p.pad_count,
        scales: p.params.iter().map(|q| q.scale).collect(),
        zero_points: p.params.iter().map(|q| q.zero_point).collect(),
        payload: w.bytes(&p.payload),
    }
}

fn segment_from_manifest(m: &SegmentManifest, payload: &[u8]) -> Result<PackedSegment> {
    if m.scales.len() != m.zero_points.len() {
        return Err(RdkvError::Format("scale/zero-point count mismatch".into()));
    }
    let params = m
        .scales
        .iter()
        .zip(&m.zero_points)
        .map(|(&scale, &zero_point)| QuantParams {
            scale,
            zero_point,
            bits: m.bits,
        })
        .collect();
    let seg = PackedSegment {
        bits: m.bits,
        rows: m.rows,
        logical_len: m.logical_len,
        pad_count: m.pad_count,
        params,
        payload: blob(payload, m.payload)?.to_vec(),
    };
    seg.validate()?;
    Ok(seg)
}

/// Packed heads of a whole model, keyed by `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub heads: Vec<((usize, usize), TriZoneCache)>,
}

impl PackedModel {
    /// Packs every head of `alloc` from the cache tensors.
    pub fn build(cache: &crate::cache::KvCache, alloc: &ModelAllocation) -> Result<Self> {
        let d = cache.shape().head_dim;
        let heads = alloc
            .heads
            .iter()
            .map(|h| {
                let tz = TriZoneCache::build(cache.keys(h.layer, h.head), cache.values(h.layer, h.head), d, h)?;
                Ok(((h.layer, h.head), tz))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&TriZoneCache> {
        self.heads
            .iter()
            .find(|(k, _)| *k == (layer, head))
            .map(|(_, tz)| tz)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BlobWriter(Vec::new());
        let heads = self
            .heads
            .iter()
            .map(|&((layer, head), ref tz)| HeadManifest {
                layer,
                head,
                head_dim: tz.head_dim,
                seq_len: tz.seq_len,
                kept: tz.kept.clone(),
                permutation: tz.permutation.clone(),
                v_segments: tz
                    .v_segments
                    .iter()
                    .map(|s| segment_manifest(&s.tokens, &s.packed, &mut w))
                    .collect(),
                k_segments: tz
                    .k_segments
                    .iter()
                    .map(|s| segment_manifest(&s.channels, &s.packed, &mut w))
                    .collect(),
                k_full_channels: tz.k_full_channels.clone(),
                k_full: w.floats(&tz.k_full),
                zone_b_tokens: tz.zone_b_tokens.clone(),
                zone_b: w.floats(&tz.zone_b),
                zone_c_len: tz.zone_c_len(),
                zone_c_keys: w.floats(&tz.new_keys),
                zone_c_values: w.floats(&tz.new_values),
            })
            .collect();
        let payload = w.0;
        let manifest = PackedManifest {
            version: 1,
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            heads,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(PACKED_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != PACKED_MAGIC {
            return Err(RdkvError::Format("bad magic bytes, expected RDKVP001".into()));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + n).ok_or(RdkvError::Truncated {
            expected: 12 + n,
            found: bytes.len(),
        })?;
        let manifest: PackedManifest = serde_json::from_slice(json)?;
        if manifest.version != 1 {
            return Err(RdkvError::Format(format!(
                "unsupported packed version {}",
                manifest.version
            )));
        }
        let payload = &bytes[12 + n..];
        if payload.len() != manifest.payload_bytes {
            return Err(RdkvError::Truncated {
                expected: 12 + n + manifest.payload_bytes,
                found: bytes.len(),
            });
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(RdkvError::Format("payload digest mismatch".into()));
        }
        let heads = manifest
            .heads
            .iter()
            .map(|m| {
                let v_segments = m
                    .v_segments
                    .iter()
                    .map(|s| {
                        Ok(VSegment {
                            tokens: s.index.clone(),
                            packed: segment_from_manifest(s, payload)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let k_segments = m
                    .k_segments
                    .iter()
                    .map(|s| {
                        Ok(KSegment {
                            channels: s.index.clone(),
                            packed: segment_from_manifest(s, payload)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let tz = TriZoneCache {
                    head_dim: m.head_dim,
                    seq_len: m.seq_len,
                    kept: m.kept.clone(),
                    v_segments,
                    k_segments,
                    k_full_channels: m.k_full_channels.clone(),
                    k_full: blob_floats(payload, m.k_full)?,
                    permutation: m.permutation.clone(),
                    zone_b_tokens: m.zone_b_tokens.clone(),
                    zone_b: blob_floats(payload, m.zone_b)?,
                    new_keys: blob_floats(payload, m.zone_c_keys)?,
                    new_values: blob_floats(payload, m.zone_c_values)?,
                };
                tz.check_layout()?;
                Ok(((m.layer, m.head), tz))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl TriZoneCache {
    /// Structural consistency of a deserialized head.
    fn check_layout(&self) -> Result<()> {
        let d = self.head_dim;
        let bad = |m: &str| Err(RdkvError::Format(m.to_string()));
        if d == 0 || self.kept.windows(2).any(|w| w[0] >= w[1]) || self.kept.iter().any(|&t| t >= self.seq_len) {
            return bad("invalid kept token list");
        }
        let mut seen = vec![false; d];
        for &c in &self.permutation {
            if c >= d || std::mem::replace(&mut seen[c], true) {
                return bad("channel permutation is not injective");
            }
        }
        let seg_channels: Vec<usize> = self
            .k_segments
            .iter()
            .flat_map(|s| s.channels.iter().copied())
            .chain(self.k_full_channels.iter().copied())
            .collect();
        if seg_channels != self.permutation {
            return bad("permutation disagrees with segment channels");
        }
        for s in &self.k_segments {
            if s.packed.rows != self.kept.len() || s.packed.logical_len != s.channels.len() {
                return bad("K segment shape mismatch");
            }
        }
        let mut v_tokens: Vec<usize> = self
            .v_segments
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .chain(self.zone_b_tokens.iter().copied())
            .collect();
        v_tokens.sort_unstable();
        if v_tokens != self.kept {
            return bad("V zones do not cover the kept tokens exactly once");
        }
        for s in &self.v_segments {
            if s.packed.rows != s.tokens.len() || s.packed.logical_len != d || s.packed.params.len() != s.tokens.len() {
                return bad("V segment shape mismatch");
            }
        }
        if self.k_full.len() != self.kept.len() * self.k_full_channels.len()
            || self.zone_b.len() != self.zone_b_tokens.len() * d
            || self.new_keys.len() != self.new_values.len()
            || self.new_keys.len() % d != 0
        {
            return bad("full-precision zone sizes mismatch");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{HeadBudget, SolveSummary};
    use proptest::prelude::*;

    pub(crate) fn manual_alloc(v_bits: Vec<u8>, k_bits: Vec<u8>) -> HeadAllocation {
        let summary = SolveSummary {
            lambda: None,
            target_avg_bits: 0.0,
            achieved_avg_bits: 0.0,
            converged: true,
        };
        HeadAllocation {
            layer: 0,
            head: 0,
            kept: KeptSets::from_bits(&v_bits),
            token_weights: vec![1.0; v_bits.len()],
            channel_weights: vec![1.0; k_bits.len()],
            v_bits,
            k_bits,
            objective_v: 0.0,
            objective_k: 0.0,
            achieved_bits: 0.0,
            budget: HeadBudget {
                tokens_per_head: 0.0,
                head_bits: 0.0,
                v_bits: 0.0,
                k_bits: 0.0,
                sub_token: false,
            },
            v_solve: summary,
            k_solve: summary,
        }
    }

    fn ramp(n: usize, phase: f32) -> Vec<f32> {
        (0..n).map(|i| ((i as f32) * 0.731 + phase).sin() * 2.0).collect()
    }

    #[test]
    fn quarter_and_half_split_conventions() {
        assert_eq!(pack_bits(&[1, 2, 3, 0], 2).unwrap(), vec![0x39]);
        assert_eq!(pack_bits(&[0xA, 0x3], 4).unwrap(), vec![0x3A]);
        assert_eq!(pack_bits(&[200, 7], 8).unwrap(), vec![200, 7]);
        assert!(matches!(pack_bits(&[4], 2), Err(RdkvError::CodeOverflow { .. })));
        assert!(pack_bits(&[1], 3).is_err());
        assert!(unpack_bits(&[0x39], 2, 5).is_err());
    }

    #[test]
    fn padded_lengths() {
        assert_eq!(padded_len(2, 5), 8);
        assert_eq!(padded_len(4, 5), 6);
        assert_eq!(padded_len(8, 5), 5);
        assert_eq!(padded_len(2, 0), 0);
    }

    proptest! {
        #[test]
        fn pack_roundtrip(raw in prop::collection::vec(any::<u8>(), 0..70), bi in 0usize..3) {
            let bits = [2u8, 4, 8][bi];
            let codes: Vec<u8> = raw.iter().map(|c| c & ((1u16 << bits) - 1) as u8).collect();
            let packed = pack_bits(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), padded_len(bits, codes.len()) * bits as usize / 8);
            prop_assert_eq!(unpack_bits(&packed, bits, codes.len()).unwrap(), codes);
        }
    }

    #[test]
    fn all_full_precision_goes_to_zone_b() {
        let (t, d) = (6, 4);
        let keys = ramp(t * d, 0.1);
        let values = ramp(t * d, 1.3);
        let alloc = manual_alloc(vec![16; t], vec![16; d]);
        let tz = TriZoneCache::build(&keys, &values, d, &alloc).unwrap();
        assert!(tz.v_segments().is_empty());
        assert_eq!(tz.zone_b_tokens(), &[0, 1, 2, 3, 4, 5]);
        let q = ramp(d, 2.0);
        let dense = dense_attention(&q, &keys, &values, d).unwrap();
        let packed = tz.decode_step(&q).unwrap();
        for (a, b) in dense.iter().zip(&packed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_channel_count_is_padded() {
        let (t, d) = (5, 8);
        let keys = ramp(t * d, 0.0);
        let values = ramp(t * d, 0.5);
        // Three 4-bit channels pad to four, five 2-bit channels pad to eight.
        let k_bits = vec![4, 4, 4, 2, 2, 2, 2, 2];
        let alloc = manual_alloc(vec![4, 0, 4, 4, 0], k_bits);
        let tz = TriZoneCache::build(&keys, &values, d, &alloc).unwrap();
        let segs = tz.k_segments();
        assert_eq!((segs[0].packed.bits, segs[0].packed.pad_count), (2, 3));
        assert_eq!((segs[1].packed.bits, segs[1].packed.pad_count), (4, 1));
        assert!(segs[1].packed.params[3].scale == 0.0 && segs[1].packed.params[3].zero_point == 0);
        assert_eq!(tz.permutation(), &[3, 4, 5, 6, 7, 0, 1, 2]);
        // Token axis is not padded: three kept rows.
        assert_eq!(segs[0].packed.rows, 3);
        assert_eq!(tz.v_segments()[0].packed.pad_count, 0);
    }

    #[test]
    fn fused_single_channel_identity() {
        let p = QuantParams { scale: 2.0, zero_point: 1, bits: 8 };
        let seg = PackedSegment {
            bits: 8,
            rows: 1,
            logical_len: 1,
            pad_count: 0,
            params: vec![p],
            payload: vec![3],
        };
        let tz = TriZoneCache {
            head_dim: 1,
            seq_len: 1,
            kept: vec![0],
            v_segments: vec![],
            k_segments: vec![KSegment { channels: vec![0], packed: seg }],
            k_full_channels: vec![],
            k_full: vec![],
            permutation: vec![0],
            zone_b_tokens: vec![0],
            zone_b: vec![1.0],
            new_keys: vec![],
            new_values: vec![],
        };
        assert_eq!(tz.fused_k_logits(&[0.5]).unwrap(), vec![2.0]);
        assert_eq!(tz.dequantized_keys().unwrap(), vec![4.0]);
    }

    #[test]
    fn mixed_layout_reconstructs_direct_quantization() {
        let (t, d) = (12, 8);
        let keys = ramp(t * d, 0.3);
        let values = ramp(t * d, 0.9);
        let v_bits = vec![16, 2, 0, 4, 8, 8, 0, 2, 16, 4, 4, 0];
        let k_bits = vec![8, 0, 2, 16, 4, 2, 4, 8];
        let alloc = manual_alloc(v_bits, k_bits);
        let tz = TriZoneCache::build(&keys, &values, d, &alloc).unwrap();
        let (k_hat, v_hat) = dense_reconstruction(&keys, &values, d, &alloc).unwrap();
        assert_eq!(tz.dequantized_keys().unwrap(), k_hat);
        assert_eq!(tz.dequantized_values().unwrap(), v_hat);
        // Token 0 keeps V at 16 bits (Zone B) while its K is quantized per channel (Zone A).
        assert!(tz.zone_b_tokens().contains(&0));
        assert_eq!(tz.v_segments().iter().map(|s| s.packed.bits).collect::<Vec<_>>(), vec![2, 4, 8]);
    }

    #[test]
    fn inconsistent_allocation_is_rejected() {
        let keys = ramp(8, 0.0);
        let mut alloc = manual_alloc(vec![4, 4], vec![4, 4, 4, 4]);
        assert!(TriZoneCache::build(&keys, &keys, 4, &alloc).is_ok());
        alloc.kept.kept.pop();
        assert!(TriZoneCache::build(&keys, &keys, 4, &alloc).is_err());
        let alloc = manual_alloc(vec![4, 3], vec![4; 4]);
        assert!(TriZoneCache::build(&keys, &keys, 4, &alloc).is_err());
        let alloc = manual_alloc(vec![4, 4, 4], vec![4; 4]);
        assert!(TriZoneCache::build(&keys, &keys, 4, &alloc).is_err());
    }

    #[test]
    fn zone_c_only_cache() {
        let d = 4;
        let keys = ramp(3 * d, 0.0);
        let alloc = manual_alloc(vec![0; 3], vec![8; d]);
        let mut tz = TriZoneCache::build(&keys, &keys, d, &alloc).unwrap();
        assert!(tz.decode_step(&[1.0; 4]).is_err());
        let nk = ramp(2 * d, 3.0);
        let nv = ramp(2 * d, 4.0);
        for i in 0..2 {
            tz.append(&nk[i * d..(i + 1) * d], &nv[i * d..(i + 1) * d]).unwrap();
        }
        assert!(tz.append(&[1.0], &[1.0]).is_err());
        let q = ramp(d, 0.7);
        let got = tz.decode_step(&q).unwrap();
        let want = dense_attention(&q, &nk, &nv, d).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn storage_accounts_allocated_bits() {
        let (t, d) = (10, 6);
        let keys = ramp(t * d, 0.1);
        let values = ramp(t * d, 0.2);
        let v_bits = vec![2, 4, 8, 16, 0, 2, 2, 4, 16, 8];
        let k_bits = vec![2, 4, 8, 16, 0, 2];
        let kept = v_bits.iter().filter(|&&b| b > 0).count();
        let alloc = manual_alloc(v_bits.clone(), k_bits.clone());
        let tz = TriZoneCache::build(&keys, &values, d, &alloc).unwrap();
        let s = tz.storage();
        let bits: usize = d * v_bits.iter().map(|&b| b as usize).sum::<usize>()
            + kept * k_bits.iter().map(|&b| b as usize).sum::<usize>();
        assert_eq!(s.allocated_bits(), bits);
        assert_eq!(s.padding_bits, 84);
    }
}
