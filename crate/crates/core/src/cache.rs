//! Cache tensors, reference attention, the `RDKVC001` container and synthetic fixtures.
//!
//! Tensors are stored flat in `f32`. Per layer, keys and values are laid out
//! `[kv_head][token][channel]` and probe queries `[q_head][window_row][channel]`.
//! Everything derived from them (attention probabilities, weights, outputs)
//! is carried in `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, RdkvError, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"RDKVC001";
const CACHE_VERSION: u32 = 1;
const LAYOUT: &str = "layer-major, head-major, row-major";

/// Dimensions of a prefilled cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheShape {
    pub layers: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
}

impl CacheShape {
    pub fn new(
        layers: usize,
        q_heads: usize,
        kv_heads: usize,
        head_dim: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let shape = Self {
            layers,
            q_heads,
            kv_heads,
            head_dim,
            seq_len,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.head_dim == 0 || self.seq_len == 0 {
            return shape_err("layers, head_dim and seq_len must be at least 1");
        }
        if self.kv_heads == 0 || self.q_heads == 0 {
            return shape_err("head counts must be at least 1");
        }
        if self.q_heads % self.kv_heads != 0 {
            return shape_err(format!(
                "q_heads ({}) is not a multiple of kv_heads ({})",
                self.q_heads, self.kv_heads
            ));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    fn kv_len(&self) -> usize {
        self.kv_heads * self.seq_len * self.head_dim
    }
}

/// Observation-window probe geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub window: usize,
    pub pool_kernel: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            window: 32,
            pool_kernel: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return arg_err("probe window must be at least 1");
        }
        if self.pool_kernel == 0 || self.pool_kernel % 2 == 0 {
            return arg_err(format!(
                "pool kernel must be odd and positive, got {}",
                self.pool_kernel
            ));
        }
        Ok(())
    }
}

/// Tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub probe_queries: Vec<f32>,
}

/// A prefilled KV cache together with the trailing window of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    shape: CacheShape,
    window: usize,
    layers: Vec<LayerTensors>,
}

impl KvCache {
    pub fn new(shape: CacheShape, window: usize, layers: Vec<LayerTensors>) -> Result<Self> {
        shape.validate()?;
        if window == 0 || window > shape.seq_len {
            return shape_err(format!(
                "probe window {} must lie in [1, {}]",
                window, shape.seq_len
            ));
        }
        if layers.len() != shape.layers {
            return shape_err(format!(
                "expected {} layers, got {}",
                shape.layers,
                layers.len()
            ));
        }
        let q_len = shape.q_heads * window * shape.head_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.keys.len() != shape.kv_len()
                || layer.values.len() != shape.kv_len()
                || layer.probe_queries.len() != q_len
            {
                return shape_err(format!("layer {i} tensor sizes disagree with shape"));
            }
            let finite = layer
                .keys
                .iter()
                .chain(&layer.values)
                .chain(&layer.probe_queries)
                .all(|x| x.is_finite());
            if !finite {
                return Err(RdkvError::Numeric(format!(
                    "layer {i} contains non-finite entries"
                )));
            }
        }
        Ok(Self {
            shape,
            window,
            layers,
        })
    }

    pub fn shape(&self) -> CacheShape {
        self.shape
    }

    /// Number of probe queries per query head.
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn layers(&self) -> &[LayerTensors] {
        &self.layers
    }

    /// Keys of one KV head, `[T × d]` row-major.
    pub fn keys(&self, layer: usize, kv_head: usize) -> &[f32] {
        let n = self.shape.seq_len * self.shape.head_dim;
        &self.layers[layer].keys[kv_head * n..(kv_head + 1) * n]
    }

    /// Values of one KV head, `[T × d]` row-major.
    pub fn values(&self, layer: usize, kv_head: usize) -> &[f32] {
        let n = self.shape.seq_len * self.shape.head_dim;
        &self.layers[layer].values[kv_head * n..(kv_head + 1) * n]
    }

    /// Probe queries of one query head, `[S_w × d]` row-major.
    pub fn probe_queries(&self, layer: usize, q_head: usize) -> &[f32] {
        let n = self.window * self.shape.head_dim;
        &self.layers[layer].probe_queries[q_head * n..(q_head + 1) * n]
    }

    /// Probe queries of every query head sharing `kv_head`, stacked `[g·S_w × d]`.
    pub fn group_queries(&self, layer: usize, kv_head: usize) -> &[f32] {
        let n = self.window * self.shape.head_dim * self.shape.group();
        &self.layers[layer].probe_queries[kv_head * n..(kv_head + 1) * n]
    }

    /// Last visible token for each probe row: row `i` sits at absolute position `T - S_w + i`.
    pub fn probe_offsets(&self) -> Vec<usize> {
        let start = self.shape.seq_len - self.window;
        (0..self.window).map(|i| start + i).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = ContainerHeader {
            version: CACHE_VERSION,
            layers: self.shape.layers,
            q_heads: self.shape.q_heads,
            kv_heads: self.shape.kv_heads,
            head_dim: self.shape.head_dim,
            seq_len: self.shape.seq_len,
            window: self.window,
            dtype: "f32".into(),
            layout: LAYOUT.into(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let tensors = [
            self.layers.iter().map(|l| &l.keys).collect::<Vec<_>>(),
            self.layers.iter().map(|l| &l.values).collect(),
            self.layers.iter().map(|l| &l.probe_queries).collect(),
        ];
        let mut buf = Vec::new();
        for group in tensors {
            for t in group {
                buf.clear();
                buf.extend(t.iter().flat_map(|x| x.to_le_bytes()));
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(RdkvError::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != CACHE_MAGIC {
            return Err(RdkvError::Format("bad magic bytes, expected RDKVC001".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(RdkvError::Truncated {
                expected: 12 + header_len,
                found: bytes.len(),
            });
        }
        let header: ContainerHeader = serde_json::from_slice(&body[..header_len])?;
        if header.version != CACHE_VERSION {
            return Err(RdkvError::Format(format!(
                "unsupported version {}",
                header.version
            )));
        }
        if header.dtype != "f32" || header.layout != LAYOUT {
            return Err(RdkvError::Format(format!(
                "unsupported dtype/layout {:?}/{:?}",
                header.dtype, header.layout
            )));
        }
        let shape = CacheShape::new(
            header.layers,
            header.q_heads,
            header.kv_heads,
            header.head_dim,
            header.seq_len,
        )?;
        let kv_len = shape.kv_len();
        let q_len = shape.q_heads * header.window * shape.head_dim;
        let floats = shape.layers * (2 * kv_len + q_len);
        let payload = &body[header_len..];
        let expected = floats * 4;
        if payload.len() < expected {
            return Err(RdkvError::Truncated {
                expected: 12 + header_len + expected,
                found: bytes.len(),
            });
        }
        if payload.len() > expected {
            return Err(RdkvError::Format(format!(
                "payload holds {} bytes but header declares {}",
                payload.len(),
                expected
            )));
        }
        let mut cursor = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| cursor.by_ref().take(n).collect::<Vec<f32>>();
        let keys: Vec<_> = (0..shape.layers).map(|_| take(kv_len)).collect();
        let values: Vec<_> = (0..shape.layers).map(|_| take(kv_len)).collect();
        let queries: Vec<_> = (0..shape.layers).map(|_| take(q_len)).collect();
        let layers = keys
            .into_iter()
            .zip(values)
            .zip(queries)
            .map(|((keys, values), probe_queries)| LayerTensors {
                keys,
                values,
                probe_queries,
            })
            .collect();
        Self::new(shape, header.window, layers)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    version: u32,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "H_q")]
    q_heads: usize,
    #[serde(rename = "H_kv")]
    kv_heads: usize,
    #[serde(rename = "d")]
    head_dim: usize,
    #[serde(rename = "T")]
    seq_len: usize,
    #[serde(rename = "S_w")]
    window: usize,
    dtype: String,
    layout: String,
}

/// Row-stochastic attention probabilities, `[queries × tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    /// Wraps raw probabilities, checking each row is a distribution.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} entries for a {rows}×{cols} attention matrix",
                data.len()
            ));
        }
        for (i, row) in data.chunks(cols.max(1)).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(RdkvError::Numeric(format!(
                    "row {i} is not a probability distribution"
                )));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Causal softmax attention of a query slice `[rows × d]` over keys `[T × d]`.
///
/// Query `i` sees tokens `0..=offsets[i]`; later entries are exactly zero.
pub fn attention_probe(
    queries: &[f32],
    keys: &[f32],
    head_dim: usize,
    offsets: &[usize],
) -> Result<AttentionMatrix> {
    if head_dim == 0 || queries.len() % head_dim != 0 || keys.len() % head_dim != 0 {
        return shape_err("query/key lengths are not multiples of head_dim");
    }
    let rows = queries.len() / head_dim;
    let t = keys.len() / head_dim;
    if offsets.len() != rows {
        return shape_err(format!("{} offsets for {rows} queries", offsets.len()));
    }
    if let Some(&bad) = offsets.iter().find(|&&o| o >= t) {
        return shape_err(format!("offset {bad} outside [0, {t})"));
    }
    if queries.iter().chain(keys).any(|x| !x.is_finite()) {
        return Err(RdkvError::Numeric("non-finite query or key".into()));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut data = vec![0.0; rows * t];
    for (i, q) in queries.chunks_exact(head_dim).enumerate() {
        let visible = offsets[i] + 1;
        let row = &mut data[i * t..i * t + visible];
        for (z, k) in row.iter_mut().zip(keys.chunks_exact(head_dim)) {
            *z = dot_f64(q, k) * scale;
        }
        softmax_in_place(row);
    }
    Ok(AttentionMatrix {
        rows,
        cols: t,
        data,
    })
}

/// `o_τ = Σ_t a[τ,t] v_t` for every query row; returns `[rows × d]`.
pub fn attention_output<T: Copy + Into<f64>>(
    attn: &AttentionMatrix,
    values: &[T],
    head_dim: usize,
) -> Result<Vec<f64>> {
    if head_dim == 0 || values.len() != attn.cols * head_dim {
        return shape_err(format!(
            "values hold {} entries, expected {} tokens × {head_dim}",
            values.len(),
            attn.cols
        ));
    }
    let mut out = vec![0.0; attn.rows * head_dim];
    for (i, o) in out.chunks_exact_mut(head_dim).enumerate() {
        for (&a, v) in attn.row(i).iter().zip(values.chunks_exact(head_dim)) {
            if a == 0.0 {
                continue;
            }
            for (oc, &vc) in o.iter_mut().zip(v) {
                *oc += a * vc.into();
            }
        }
    }
    Ok(out)
}

/// Channels whose keys get scaled in [`synthetic_cache`] for a given seed.
pub fn outlier_channels(seed: u64, head_dim: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c_6965_7273);
    let mut channels: Vec<usize> = (0..head_dim).collect();
    channels.shuffle(&mut rng);
    channels.truncate(count);
    channels.sort_unstable();
    channels
}

/// Deterministic standard-normal cache with a few scaled key channels.
///
/// The same outlier channels are used in every layer and KV head. The probe
/// window is clamped to the sequence length.
pub fn synthetic_cache(
    seed: u64,
    shape: CacheShape,
    window: usize,
    outliers: usize,
    outlier_scale: f32,
) -> Result<KvCache> {
    shape.validate()?;
    if outliers > shape.head_dim {
        return arg_err(format!(
            "{outliers} outlier channels requested but head_dim is {}",
            shape.head_dim
        ));
    }
    if !outlier_scale.is_finite() {
        return arg_err("outlier scale must be finite");
    }
    let window = window.clamp(1, shape.seq_len);
    let special = outlier_channels(seed, shape.head_dim, outliers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let d = shape.head_dim;
    let layers = (0..shape.layers)
        .map(|_| {
            let mut keys = normal(shape.kv_len());
            let values = normal(shape.kv_len());
            let probe_queries = normal(shape.q_heads * window * d);
            for row in keys.chunks_exact_mut(d) {
                for &c in &special {
                    row[c] *= outlier_scale;
                }
            }
            LayerTensors {
                keys,
                values,
                probe_queries,
            }
        })
        .collect();
    KvCache::new(shape, window, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> CacheShape {
        CacheShape::new(2, 4, 2, 8, 16).unwrap()
    }

    #[test]
    fn shape_rejects_non_integral_group() {
        assert!(CacheShape::new(1, 6, 4, 8, 8).is_err());
        assert!(CacheShape::new(0, 4, 2, 8, 8).is_err());
        assert_eq!(CacheShape::new(1, 8, 2, 8, 8).unwrap().group(), 4);
    }

    #[test]
    fn probe_config_requires_odd_kernel() {
        assert!(ProbeConfig { window: 4, pool_kernel: 4 }.validate().is_err());
        assert!(ProbeConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_query_gives_uniform_row() {
        let keys: Vec<f32> = (0..5 * 3).map(|i| i as f32 * 0.37 - 2.0).collect();
        let a = attention_probe(&[0.0; 3], &keys, 3, &[4]).unwrap();
        for &p in a.row(0) {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_closed_form() {
        // d = 1, so logits are q·k exactly: 0 and ln 4.
        let keys = [0.0f32, 4f32.ln()];
        let a = attention_probe(&[1.0], &keys, 1, &[1]).unwrap();
        assert!((a.row(0)[0] - 0.2).abs() < 1e-7);
        assert!((a.row(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn causal_entries_are_exactly_zero() {
        let keys: Vec<f32> = (0..6 * 2).map(|i| (i as f32).sin()).collect();
        let q = [0.3f32, -1.2, 0.5, 0.5];
        let a = attention_probe(&q, &keys, 2, &[2, 5]).unwrap();
        assert!(a.row(0)[3..].iter().all(|&p| p == 0.0));
        for i in 0..2 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_rejects_bad_shapes() {
        assert!(matches!(
            attention_probe(&[1.0, 2.0, 3.0], &[1.0; 4], 2, &[0]),
            Err(RdkvError::Shape(_))
        ));
        assert!(attention_probe(&[1.0, 2.0], &[1.0; 4], 2, &[2]).is_err());
        assert!(matches!(
            attention_probe(&[f32::NAN, 2.0], &[1.0; 4], 2, &[1]),
            Err(RdkvError::Numeric(_))
        ));
    }

    #[test]
    fn one_hot_attention_selects_row() {
        let t = 5;
        let mut probs = vec![0.0; t];
        probs[3] = 1.0;
        let a = AttentionMatrix::from_rows(1, t, probs).unwrap();
        let values: Vec<f32> = (0..t * 4).map(|i| i as f32 * 0.5).collect();
        let o = attention_output(&a, &values, 4).unwrap();
        let expect: Vec<f64> = values[12..16].iter().map(|&v| v as f64).collect();
        assert_eq!(o, expect);
    }

    #[test]
    fn uniform_attention_averages() {
        let t = 4;
        let a = AttentionMatrix::from_rows(1, t, vec![0.25; t]).unwrap();
        let values: Vec<f32> = (0..t * 2).map(|i| i as f32).collect();
        let o = attention_output(&a, &values, 2).unwrap();
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 4.0).abs() < 1e-12);
        assert!(attention_output(&a, &values[..6], 2).is_err());
    }

    #[test]
    fn container_roundtrip_is_exact() {
        let cache = synthetic_cache(7, small_shape(), 4, 1, 10.0).unwrap();
        let bytes = cache.to_bytes();
        assert_eq!(&bytes[..8], CACHE_MAGIC);
        assert_eq!(KvCache::from_bytes(&bytes).unwrap(), cache);
    }

    #[test]
    fn container_rejects_bad_magic() {
        let mut bytes = synthetic_cache(7, small_shape(), 4, 0, 1.0).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(KvCache::from_bytes(&bytes), Err(RdkvError::Format(_))));
    }

    #[test]
    fn container_detects_missing_rows() {
        // Header declares T = 10; drop one token row's worth of floats.
        let shape = CacheShape::new(1, 1, 1, 4, 10).unwrap();
        let cache = synthetic_cache(1, shape, 2, 0, 1.0).unwrap();
        let bytes = cache.to_bytes();
        let cut = &bytes[..bytes.len() - 4 * 4];
        assert!(matches!(KvCache::from_bytes(cut), Err(RdkvError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(KvCache::from_bytes(&extra), Err(RdkvError::Format(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_cache(42, small_shape(), 4, 2, 50.0).unwrap();
        let b = synthetic_cache(42, small_shape(), 4, 2, 50.0).unwrap();
        let c = synthetic_cache(43, small_shape(), 4, 2, 50.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_too_many_outliers() {
        assert!(synthetic_cache(1, small_shape(), 4, 9, 2.0).is_err());
    }

    fn column_norms(keys: &[f32], d: usize) -> Vec<f64> {
        let mut norms = vec![0.0f64; d];
        for row in keys.chunks_exact(d) {
            for (n, &x) in norms.iter_mut().zip(row) {
                *n += (x as f64).powi(2);
            }
        }
        norms.into_iter().map(f64::sqrt).collect()
    }

    #[test]
    fn unit_scale_has_no_dominant_channel() {
        let shape = CacheShape::new(1, 1, 1, 64, 256).unwrap();
        let cache = synthetic_cache(2024, shape, 32, 0, 1.0).unwrap();
        let mut norms = column_norms(cache.keys(0, 0), 64);
        norms.sort_by(f64::total_cmp);
        let median = 0.5 * (norms[31] + norms[32]);
        assert!(norms[63] / median < 5.0);
    }

    #[test]
    fn outlier_channels_have_largest_norms() {
        let shape = CacheShape::new(1, 1, 1, 64, 256).unwrap();
        let cache = synthetic_cache(2024, shape, 32, 2, 100.0).unwrap();
        let norms = column_norms(cache.keys(0, 0), 64);
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
        let mut top = order[..2].to_vec();
        top.sort_unstable();
        assert_eq!(top, outlier_channels(2024, 64, 2));
    }

    #[test]
    fn accessors_slice_the_right_heads() {
        let cache = synthetic_cache(3, small_shape(), 4, 0, 1.0).unwrap();
        let per_head = 16 * 8;
        assert_eq!(cache.keys(1, 1), &cache.layers()[1].keys[per_head..]);
        assert_eq!(cache.group_queries(0, 1).len(), 2 * 4 * 8);
        assert_eq!(cache.probe_offsets(), vec![12, 13, 14, 15]);
    }
}
