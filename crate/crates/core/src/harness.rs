//! Report generation: budget sweeps with duality bounds, per-unit bit dumps and
//! packed-versus-dense verification.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{best_dual_bound, mckp_bisect, RateCurve, SolverConfig};
use crate::cache::{KvCache, ProbeConfig};
use crate::error::{arg_err, RdkvError, Result};
use crate::pipeline::{head_weights, ModelAllocation};
use crate::quantizer::{BitSet, DistortionTable};
use crate::trizone::{dense_attention, dense_reconstruction, PackedModel};
use crate::weights::UnitKind;

/// Linear-interpolation quantile of unsorted data, `p ∈ [0, 1]`.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    Some(match v.get(i + 1) {
        Some(next) if frac > 0.0 => v[i] + frac * (next - v[i]),
        _ => v[i],
    })
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub units: UnitKind,
    pub bits: BitSet,
    pub probe: ProbeConfig,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        Self {
            grid: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            units: UnitKind::Token,
            bits: BitSet::default(),
            probe: ProbeConfig::default(),
            tolerance: solver.tolerance,
            max_iterations: solver.max_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seq_id: usize,
    pub avg_bits: f64,
    /// Weighted distortion of the allocation, summed over heads.
    pub primal: f64,
    /// Best Lagrangian lower bound, summed over heads; `+∞` when no allocation fits.
    pub dual: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub avg_bits: f64,
    pub primal_median: f64,
    pub primal_q25: f64,
    pub primal_q75: f64,
    pub dual_median: f64,
    pub dual_q25: f64,
    pub dual_q75: f64,
    pub all_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

struct HeadInstance {
    seq: usize,
    weights: Vec<f64>,
}

/// Sweeps every cache over the average-bit grid.
///
/// Each head is solved in strict budget mode so the primal is feasible
/// whenever any allocation fits, keeping the dual below it.
pub fn sweep(caches: &[KvCache], table: &DistortionTable, config: &SweepConfig) -> Result<SweepResult> {
    if config.grid.is_empty() {
        return arg_err("sweep grid is empty");
    }
    if let Some(b) = config.grid.iter().find(|b| !(**b > 0.0 && **b <= 16.0)) {
        return arg_err(format!("grid value {b} outside (0, 16]"));
    }
    if caches.is_empty() {
        return arg_err("sweep needs at least one cache");
    }
    if table.granularity != config.units {
        return arg_err("distortion table granularity differs from swept units");
    }
    let curve = RateCurve::from_table(table, &config.bits)?;
    let solver = SolverConfig {
        tolerance: config.tolerance,
        max_iterations: config.max_iterations,
        strict: true,
    };
    solver.validate()?;

    let keys: Vec<(usize, usize, usize)> = caches
        .iter()
        .enumerate()
        .flat_map(|(s, c)| {
            let sh = c.shape();
            (0..sh.layers).flat_map(move |l| (0..sh.kv_heads).map(move |h| (s, l, h)))
        })
        .collect();
    let heads = keys
        .par_iter()
        .map(|&(s, l, h)| {
            let (tokens, channels) = head_weights(&caches[s], l, h, &config.probe)?;
            let weights = match config.units {
                UnitKind::Token => tokens.values,
                UnitKind::Channel => channels.values,
            };
            Ok(HeadInstance { seq: s, weights })
        })
        .collect::<Result<Vec<_>>>()?;

    let points: Vec<(usize, f64)> = (0..caches.len())
        .flat_map(|s| config.grid.iter().map(move |&b| (s, b)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(seq, avg_bits)| {
            let mut row = SweepRow {
                seq_id: seq,
                avg_bits,
                primal: 0.0,
                dual: 0.0,
                feasible: true,
            };
            for head in heads.iter().filter(|h| h.seq == seq) {
                let units = head.weights.len() as f64;
                let alloc = mckp_bisect(&head.weights, &curve, avg_bits, &solver)?;
                let used: f64 = alloc.bits.iter().map(|&b| b as f64).sum();
                row.primal += alloc.objective;
                row.feasible &= used <= avg_bits * units * (1.0 + 1e-12);
                row.dual += if (curve.min_bits() as f64) > avg_bits {
                    f64::INFINITY
                } else {
                    best_dual_bound(&head.weights, &curve, avg_bits * units)?.g_lambda
                };
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregates = config
        .grid
        .iter()
        .map(|&b| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.avg_bits == b).collect();
            let primal: Vec<f64> = group.iter().map(|r| r.primal).collect();
            let dual: Vec<f64> = group.iter().map(|r| r.dual).collect();
            let q = |v: &[f64], p| quantile(v, p).unwrap_or(f64::NAN);
            SweepAggregate {
                avg_bits: b,
                primal_median: q(&primal, 0.5),
                primal_q25: q(&primal, 0.25),
                primal_q75: q(&primal, 0.75),
                dual_median: q(&dual, 0.5),
                dual_q25: q(&dual, 0.25),
                dual_q75: q(&dual, 0.75),
                all_feasible: group.iter().all(|r| r.feasible),
            }
        })
        .collect();
    Ok(SweepResult { rows, aggregates })
}

impl SweepResult {
    /// Per-sequence rows followed by `median`, `q25` and `q75` rows per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq_id,avg_bits,primal,dual,feasible\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.seq_id, r.avg_bits, r.primal, r.dual, r.feasible);
        }
        for a in &self.aggregates {
            for (label, p, d) in [
                ("median", a.primal_median, a.dual_median),
                ("q25", a.primal_q25, a.dual_q25),
                ("q75", a.primal_q75, a.dual_q75),
            ] {
                let _ = writeln!(out, "{label},{},{p},{d},{}", a.avg_bits, a.all_feasible);
            }
        }
        out
    }

    /// Checks the duality sandwich and monotonicity in `b̄` for every sequence.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for r in &self.rows {
            if r.feasible && r.dual > r.primal + 1e-12 * r.primal.abs().max(1.0) {
                return Err(format!(
                    "sequence {} at {} bits: dual {} exceeds primal {}",
                    r.seq_id, r.avg_bits, r.dual, r.primal
                ));
            }
        }
        let mut seqs: Vec<usize> = self.rows.iter().map(|r| r.seq_id).collect();
        seqs.dedup();
        for s in seqs {
            let mut group: Vec<&SweepRow> = self.rows.iter().filter(|r| r.seq_id == s && r.feasible).collect();
            group.sort_by(|a, b| a.avg_bits.total_cmp(&b.avg_bits));
            for w in group.windows(2) {
                if w[1].primal > w[0].primal {
                    return Err(format!(
                        "sequence {s}: primal rises from {} at {} bits to {} at {} bits",
                        w[0].primal, w[0].avg_bits, w[1].primal, w[1].avg_bits
                    ));
                }
            }
        }
        Ok(())
    }

    /// Median primal and dual against `b̄` with an interquartile band, as SVG.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let pts: Vec<&SweepAggregate> = self.aggregates.iter().filter(|a| a.primal_q75.is_finite()).collect();
        let y_max = pts
            .iter()
            .map(|a| a.primal_q75)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let x = |b: f64| m + (b / 16.0) * (w - 2.0 * m);
        let y = |v: f64| h - m - (v.clamp(0.0, y_max) / y_max) * (h - 2.0 * m);
        let path = |f: &dyn Fn(&SweepAggregate) -> f64| {
            pts.iter()
                .map(|a| format!("{:.2},{:.2}", x(a.avg_bits), y(f(a))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let band: String = pts
            .iter()
            .map(|a| format!("{:.2},{:.2}", x(a.avg_bits), y(a.primal_q75)))
            .chain(pts.iter().rev().map(|a| format!("{:.2},{:.2}", x(a.avg_bits), y(a.primal_q25))))
            .collect::<Vec<_>>()
            .join(" ");
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        let _ = writeln!(
            s,
            r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
            h - m,
            w - m
        );
        let _ = writeln!(s, r#"<polygon points="{band}" fill="steelblue" fill-opacity="0.25"/>"#);
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path(&|a| a.primal_median));
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#,
            path(&|a| if a.dual_median.is_finite() { a.dual_median.max(0.0) } else { y_max })
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">average bits</text>"#, w / 2.0 - 30.0, h - 8.0);
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="12">distortion</text>"#, m - 10.0);
        s.push_str("</svg>\n");
        s
    }
}

/// `index,weight,bit` rows for one head's V tokens or K channels.
pub fn dump_bits(alloc: &ModelAllocation, layer: usize, head: usize, units: UnitKind) -> Result<String> {
    let h = alloc
        .get(layer, head)
        .ok_or_else(|| RdkvError::InvalidArgument(format!("no allocation for layer {layer}, head {head}")))?;
    let (weights, bits) = match units {
        UnitKind::Token => (&h.token_weights, &h.v_bits),
        UnitKind::Channel => (&h.channel_weights, &h.k_bits),
    };
    let mut out = String::from("index,weight,bit\n");
    for (i, (w, b)) in weights.iter().zip(bits).enumerate() {
        let _ = writeln!(out, "{i},{w},{b}");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub heads: usize,
    pub queries: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares packed decode against dense attention over directly reconstructed
/// `(K̂, V̂)` plus `appended` random decode tokens, for random queries on every head.
///
/// The relative error of one output is `‖packed - dense‖∞ / ‖dense‖∞`.
pub fn verify_packed(
    cache: &KvCache,
    alloc: &ModelAllocation,
    packed: &PackedModel,
    queries: usize,
    appended: usize,
    seed: u64,
    tolerance: f64,
) -> Result<VerifyReport> {
    if queries == 0 {
        return arg_err("verification needs at least one query");
    }
    let d = cache.shape().head_dim;
    if packed.heads.len() != alloc.heads.len() {
        return Err(RdkvError::Format(format!(
            "packed cache has {} heads, allocation has {}",
            packed.heads.len(),
            alloc.heads.len()
        )));
    }
    let errors = alloc
        .heads
        .par_iter()
        .map(|h| {
            let mut tz = packed
                .get(h.layer, h.head)
                .ok_or_else(|| RdkvError::Format(format!("packed cache lacks head ({}, {})", h.layer, h.head)))?
                .clone();
            if tz.kept() != h.kept.kept.as_slice() {
                return Err(RdkvError::Format("packed kept set differs from allocation".into()));
            }
            let keys = cache.keys(h.layer, h.head);
            let values = cache.values(h.layer, h.head);
            let (mut k_ref, mut v_ref) = dense_reconstruction(keys, values, d, h)?;
            let head_seed = seed ^ ((h.layer as u64) << 32 | h.head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
            let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
            for _ in 0..appended {
                let (k, v) = (normal(d), normal(d));
                tz.append(&k, &v)?;
                k_ref.extend(k);
                v_ref.extend(v);
            }
            let mut worst = 0.0f64;
            for _ in 0..queries {
                let q = normal(d);
                let got = tz.decode_step(&q)?;
                let want = dense_attention(&q, &k_ref, &v_ref, d)?;
                worst = worst.max(rel_linf(&got, &want));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_rel_error = errors.into_iter().fold(0.0, f64::max);
    Ok(VerifyReport {
        heads: alloc.heads.len(),
        queries,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// `‖a - b‖∞ / ‖b‖∞`, with the denominator floored to avoid division by zero.
pub fn rel_linf(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    diff / scale
}
