//! Uniform asymmetric scalar quantization and distortion-table calibration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::error::{arg_err, shape_err, RdkvError, Result};
use crate::weights::UnitKind;

/// Every bit-width the layout can realize.
pub const ALL_WIDTHS: [u8; 5] = [0, 2, 4, 8, 16];

/// Smallest dynamic range a unit is fitted to.
const MIN_RANGE: f64 = 1e-12;

/// Ordered set of allowed bit-widths, a subset of `{0, 2, 4, 8, 16}` that always holds 16.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitSet(Vec<u8>);

impl BitSet {
    pub fn new(mut widths: Vec<u8>) -> Result<Self> {
        widths.sort_unstable();
        widths.dedup();
        if let Some(bad) = widths.iter().find(|b| !ALL_WIDTHS.contains(b)) {
            return arg_err(format!("unsupported bit-width {bad}"));
        }
        if widths.last() != Some(&16) {
            return arg_err("bit set must contain 16");
        }
        Ok(Self(widths))
    }

    /// `{0, 16}`: keep at full precision or evict.
    pub fn evict_only() -> Self {
        Self(vec![0, 16])
    }

    /// `{2, 4, 8, 16}`: quantize every unit, never evict.
    pub fn quant_only() -> Self {
        Self(vec![2, 4, 8, 16])
    }

    /// `{0, 4, 16}`.
    pub fn tri_state() -> Self {
        Self(vec![0, 4, 16])
    }

    pub fn widths(&self) -> &[u8] {
        &self.0
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0.contains(&b)
    }

    /// Widths that go through the quantizer (`2`, `4`, `8`).
    pub fn quantized(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied().filter(|&b| b != 0 && b != 16)
    }
}

impl Default for BitSet {
    fn default() -> Self {
        Self(ALL_WIDTHS.to_vec())
    }
}

impl TryFrom<Vec<u8>> for BitSet {
    type Error = RdkvError;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitSet> for Vec<u8> {
    fn from(b: BitSet) -> Self {
        b.0
    }
}

impl FromStr for BitSet {
    type Err = RdkvError;
    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| RdkvError::InvalidArgument(format!("bad bit-width {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

impl fmt::Display for BitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u8::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Scale and integer zero-point of one quantized unit. Dequantization is `s·(code - z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u32,
    pub bits: u8,
}

impl QuantParams {
    /// Parameters of a padding slot: dequantizes every code to zero.
    pub fn padding(bits: u8) -> Self {
        Self {
            scale: 0.0,
            zero_point: 0,
            bits,
        }
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    #[inline]
    pub fn dequantize(&self, code: u32) -> f64 {
        self.scale as f64 * (code as f64 - self.zero_point as f64)
    }
}

fn check_quant_bits(bits: u8) -> Result<()> {
    // Storage uses 2, 4 and 8; other widths serve rate-distortion measurements.
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        arg_err(format!("quantizer supports 1 to 8 bits, got {bits}"))
    }
}

/// Quantizes one unit (a V row or a K column) with a single scale and zero-point.
///
/// The fitted range always contains zero, so zero is a grid point and no
/// coordinate is reconstructed further from its value than zero is.
pub fn quantize_unit(values: &[f32], bits: u8) -> Result<(Vec<u8>, QuantParams)> {
    check_quant_bits(bits)?;
    if values.is_empty() {
        return shape_err("cannot quantize an empty unit");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RdkvError::Numeric("non-finite value in unit".into()));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let (lo, hi) = values.iter().fold((0.0f64, 0.0f64), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let scale = ((hi - lo).max(MIN_RANGE) / levels) as f32;
    let s = scale as f64;
    let zero_point = (-lo / s).round().clamp(0.0, levels);
    let codes = values
        .iter()
        .map(|&v| ((v as f64 / s).round() + zero_point).clamp(0.0, levels) as u8)
        .collect();
    Ok((
        codes,
        QuantParams {
            scale,
            zero_point: zero_point as u32,
            bits,
        },
    ))
}

pub fn dequantize_unit(codes: &[u8], params: &QuantParams) -> Result<Vec<f32>> {
    let max = params.max_code();
    codes
        .iter()
        .map(|&c| {
            if c as u32 > max {
                Err(RdkvError::CodeOverflow {
                    code: c as u32,
                    bits: params.bits,
                })
            } else {
                Ok(params.dequantize(c as u32) as f32)
            }
        })
        .collect()
}

/// Quantize then dequantize; the reconstruction a unit at `bits` stands for.
///
/// `0` reconstructs to zeros and `16` returns the values unchanged.
pub fn reconstruct_unit(values: &[f32], bits: u8) -> Result<Vec<f32>> {
    match bits {
        0 => Ok(vec![0.0; values.len()]),
        16 => Ok(values.to_vec()),
        b => {
            let (codes, params) = quantize_unit(values, b)?;
            dequantize_unit(&codes, &params)
        }
    }
}

/// Per-coordinate RMS scale `R/(2√3)` of a uniform quantizer over range `R`.
pub fn bennett_sigma(range: f64) -> Result<f64> {
    if !(range >= 0.0) {
        return arg_err(format!("dynamic range must be nonnegative, got {range}"));
    }
    Ok(range / (2.0 * 3f64.sqrt()))
}

/// `‖x̂ - x‖² / ‖x‖²`.
pub fn unit_nmse(original: &[f32], reconstructed: &[f32]) -> Result<f64> {
    if original.len() != reconstructed.len() {
        return shape_err("original and reconstruction differ in length");
    }
    let (err, norm) = original
        .iter()
        .zip(reconstructed)
        .fold((0.0f64, 0.0f64), |(e, n), (&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (e + (y - x).powi(2), n + x * x)
        });
    if norm == 0.0 {
        return Err(RdkvError::Numeric("unit has zero norm".into()));
    }
    Ok(err / norm)
}

/// Normalized distortion `ε(b)` per bit-width at one granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct DistortionTable {
    pub granularity: UnitKind,
    pub eps: BTreeMap<u8, f64>,
    pub provenance: String,
}

#[derive(Deserialize)]
struct RawTable {
    granularity: UnitKind,
    eps: BTreeMap<u8, f64>,
    provenance: String,
}

impl TryFrom<RawTable> for DistortionTable {
    type Error = RdkvError;
    fn try_from(raw: RawTable) -> Result<Self> {
        Self::new(raw.granularity, raw.eps, raw.provenance)
    }
}

impl DistortionTable {
    pub fn new(
        granularity: UnitKind,
        eps: BTreeMap<u8, f64>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if eps.get(&0) != Some(&1.0) || eps.get(&16) != Some(&0.0) {
            return Err(RdkvError::Format(
                "distortion table must have eps(0) = 1 and eps(16) = 0".into(),
            ));
        }
        if let Some(bad) = eps.keys().find(|b| !ALL_WIDTHS.contains(b)) {
            return Err(RdkvError::Format(format!("unsupported bit-width {bad}")));
        }
        let vals: Vec<f64> = eps.values().copied().collect();
        if vals.windows(2).any(|w| !(w[0] > w[1])) || vals.iter().any(|e| !e.is_finite()) {
            return Err(RdkvError::Format(
                "distortion must be strictly decreasing in bit-width".into(),
            ));
        }
        Ok(Self {
            granularity,
            eps,
            provenance: provenance.into(),
        })
    }

    /// Builds a table from `ε(2), ε(4), ε(8)`; `ε(0) = 1` and `ε(16) = 0` are implied.
    pub fn from_quantized(
        granularity: UnitKind,
        eps2: f64,
        eps4: f64,
        eps8: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let eps = BTreeMap::from([(0, 1.0), (2, eps2), (4, eps4), (8, eps8), (16, 0.0)]);
        Self::new(granularity, eps, provenance)
    }

    /// Published layer-averaged table for a real 8B-parameter model.
    pub fn reference(granularity: UnitKind) -> Self {
        let json = match granularity {
            UnitKind::Token => include_str!("../fixtures/reference_eps_v.json"),
            UnitKind::Channel => include_str!("../fixtures/reference_eps_k.json"),
        };
        Self::from_json(json).expect("bundled reference table is valid")
    }

    pub fn get(&self, bits: u8) -> Option<f64> {
        self.eps.get(&bits).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Units of one head at a granularity: V rows (token) or K columns (channel).
fn head_units(cache: &KvCache, layer: usize, head: usize, kind: UnitKind) -> Vec<Vec<f32>> {
    let d = cache.shape().head_dim;
    match kind {
        UnitKind::Token => cache
            .values(layer, head)
            .chunks_exact(d)
            .map(<[f32]>::to_vec)
            .collect(),
        UnitKind::Channel => {
            let keys = cache.keys(layer, head);
            (0..d)
                .map(|c| keys.chunks_exact(d).map(|r| r[c]).collect())
                .collect()
        }
    }
}

/// Measures `ε(b)` as the mean per-unit NMSE over every unit, head, layer and cache.
///
/// Zero-norm units are skipped. Per-head partial sums are reduced in a fixed
/// order so the result does not depend on thread scheduling.
pub fn calibrate_epsilon(
    caches: &[KvCache],
    granularity: UnitKind,
    bits: &BitSet,
) -> Result<DistortionTable> {
    if caches.is_empty() {
        return arg_err("calibration needs at least one cache");
    }
    let jobs: Vec<(usize, usize, usize)> = caches
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let s = c.shape();
            (0..s.layers).flat_map(move |l| (0..s.kv_heads).map(move |h| (i, l, h)))
        })
        .collect();
    let widths: Vec<u8> = bits.quantized().collect();

    let partials: Vec<Result<(Vec<f64>, usize)>> = jobs
        .par_iter()
        .map(|&(i, l, h)| {
            let mut sums = vec![0.0; widths.len()];
            let mut count = 0;
            for unit in head_units(&caches[i], l, h, granularity) {
                if unit.iter().all(|&x| x == 0.0) {
                    continue;
                }
                count += 1;
                for (sum, &b) in sums.iter_mut().zip(&widths) {
                    *sum += unit_nmse(&unit, &reconstruct_unit(&unit, b)?)?;
                }
            }
            Ok((sums, count))
        })
        .collect();

    let mut totals = vec![0.0; widths.len()];
    let mut count = 0usize;
    for p in partials {
        let (sums, n) = p?;
        count += n;
        totals.iter_mut().zip(sums).for_each(|(t, s)| *t += s);
    }
    if count == 0 {
        return Err(RdkvError::Numeric(
            "every calibration unit has zero norm".into(),
        ));
    }
    let mut eps = BTreeMap::from([(0, 1.0), (16, 0.0)]);
    for (&b, t) in widths.iter().zip(totals) {
        eps.insert(b, t / count as f64);
    }
    let kind = match granularity {
        UnitKind::Token => "per-token V",
        UnitKind::Channel => "per-channel K",
    };
    DistortionTable::new(
        granularity,
        eps,
        format!(
            "calibrated {kind} NMSE over {} caches, {count} units",
            caches.len()
        ),
    )
}
