//! Per-head allocation: weights, then V tokens, then K channels over the kept tokens.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{mckp_bisect, objective, DiscreteAllocation, RateCurve, SolverConfig};
use crate::cache::{attention_probe, KvCache, ProbeConfig};
use crate::error::{arg_err, shape_err, RdkvError, Result};
use crate::quantizer::{BitSet, DistortionTable};
use crate::weights::{channel_weights, token_weights, UnitKind, WeightVector};

/// Bits per full-precision scalar in budget accounting.
pub const FULL_PRECISION_BITS: f64 = 16.0;

/// FP16-equivalent token budget per layer and how it is split between K and V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub n_tokens: usize,
    /// Fraction of each head's bits given to K.
    pub r_k: f64,
    pub bits: BitSet,
}

impl BudgetSpec {
    pub fn new(n_tokens: usize, r_k: f64, bits: BitSet) -> Result<Self> {
        let spec = Self { n_tokens, r_k, bits };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return arg_err("token budget must be at least 1");
        }
        if !(self.r_k > 0.0 && self.r_k < 1.0) {
            return arg_err(format!("r_K must lie in (0, 1), got {}", self.r_k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBudget {
    pub tokens_per_head: f64,
    pub head_bits: f64,
    pub v_bits: f64,
    pub k_bits: f64,
    /// Fewer budget tokens than KV heads: each head gets a fractional token.
    pub sub_token: bool,
}

/// Splits the per-layer budget evenly across KV heads: `B_head = 2·(n/H_kv)·d·16`.
pub fn head_budget(spec: &BudgetSpec, head_dim: usize, kv_heads: usize) -> Result<HeadBudget> {
    spec.validate()?;
    if head_dim == 0 || kv_heads == 0 {
        return shape_err("head_dim and kv_heads must be positive");
    }
    let tokens_per_head = spec.n_tokens as f64 / kv_heads as f64;
    let head_bits = 2.0 * tokens_per_head * head_dim as f64 * FULL_PRECISION_BITS;
    Ok(HeadBudget {
        tokens_per_head,
        head_bits,
        k_bits: spec.r_k * head_bits,
        v_bits: (1.0 - spec.r_k) * head_bits,
        sub_token: spec.n_tokens < kv_heads,
    })
}

/// Calibrated distortion for both granularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub v: DistortionTable,
    pub k: DistortionTable,
}

impl Tables {
    pub fn new(v: DistortionTable, k: DistortionTable) -> Result<Self> {
        if v.granularity != UnitKind::Token || k.granularity != UnitKind::Channel {
            return arg_err("expected a per-token V table and a per-channel K table");
        }
        Ok(Self { v, k })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub probe: ProbeConfig,
    pub solver: SolverConfig,
    /// Pin the observation-window tokens at full precision instead of letting them compete.
    pub force_window_retain: bool,
}

/// Kept/evicted token partition of one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSets {
    pub kept: Vec<usize>,
    pub evicted: Vec<usize>,
    /// Kept tokens whose V stays at full precision.
    pub v16: Vec<usize>,
}

impl KeptSets {
    pub fn from_bits(v_bits: &[u8]) -> Self {
        let mut sets = Self {
            kept: Vec::new(),
            evicted: Vec::new(),
            v16: Vec::new(),
        };
        for (t, &b) in v_bits.iter().enumerate() {
            match b {
                0 => sets.evicted.push(t),
                16 => {
                    sets.kept.push(t);
                    sets.v16.push(t);
                }
                _ => sets.kept.push(t),
            }
        }
        sets
    }
}

/// How a solver run ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub lambda: Option<f64>,
    pub target_avg_bits: f64,
    pub achieved_avg_bits: f64,
    pub converged: bool,
}

impl SolveSummary {
    fn trivial(target: f64, achieved: f64) -> Self {
        Self {
            lambda: None,
            target_avg_bits: target,
            achieved_avg_bits: achieved,
            converged: true,
        }
    }
}

impl From<&DiscreteAllocation> for SolveSummary {
    fn from(a: &DiscreteAllocation) -> Self {
        Self {
            lambda: a.lambda,
            target_avg_bits: a.target_avg_bits,
            achieved_avg_bits: a.achieved_avg_bits,
            converged: a.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VAllocation {
    pub bits: Vec<u8>,
    pub kept: KeptSets,
    pub summary: SolveSummary,
}

/// Stage 2: token bit-widths for V under `v_budget_bits` total bits.
///
/// Each token holds `d` scalars, so the solver sees a budget of
/// `v_budget_bits / d` summed bit-widths. Tokens in `retained` are pinned at
/// the curve's top width and charged against the budget first.
pub fn allocate_v(
    weights: &WeightVector,
    curve: &RateCurve,
    v_budget_bits: f64,
    head_dim: usize,
    retained: &[usize],
    config: &SolverConfig,
) -> Result<VAllocation> {
    let t = weights.len();
    if t == 0 {
        return shape_err("cannot allocate an empty token axis");
    }
    if let Some(&bad) = retained.iter().find(|&&i| i >= t) {
        return shape_err(format!("retained token {bad} outside [0, {t})"));
    }
    let mut pinned = vec![false; t];
    retained.iter().for_each(|&i| pinned[i] = true);
    let free: Vec<usize> = (0..t).filter(|&i| !pinned[i]).collect();
    let top = curve.max_bits();
    let total = v_budget_bits / head_dim as f64;
    let remaining = total - (t - free.len()) as f64 * top as f64;

    let mut bits = vec![top; t];
    let summary = if free.is_empty() {
        SolveSummary::trivial(top as f64, top as f64)
    } else {
        let target = (remaining / free.len() as f64).min(FULL_PRECISION_BITS);
        let free_weights: Vec<f64> = free.iter().map(|&i| weights.values[i]).collect();
        if target <= 0.0 {
            free.iter().for_each(|&i| bits[i] = curve.min_bits());
            SolveSummary::trivial(target.max(0.0), curve.min_bits() as f64)
        } else {
            let sol = mckp_bisect(&free_weights, curve, target, config)?;
            for (&i, &b) in free.iter().zip(&sol.bits) {
                bits[i] = b;
            }
            SolveSummary::from(&sol)
        }
    };
    Ok(VAllocation {
        kept: KeptSets::from_bits(&bits),
        bits,
        summary,
    })
}

/// Stage 3: channel bit-widths for K, spending `k_budget_bits` over the kept tokens only.
///
/// With no kept tokens every channel is dropped.
pub fn allocate_k(
    weights: &WeightVector,
    curve: &RateCurve,
    k_budget_bits: f64,
    kept_count: usize,
    config: &SolverConfig,
) -> Result<(Vec<u8>, SolveSummary)> {
    let d = weights.len();
    if d == 0 {
        return shape_err("cannot allocate an empty channel axis");
    }
    if kept_count == 0 {
        return Ok((vec![0; d], SolveSummary::trivial(0.0, 0.0)));
    }
    let per_channel_total = k_budget_bits / kept_count as f64;
    let target = (per_channel_total / d as f64).min(FULL_PRECISION_BITS);
    if target <= 0.0 {
        return Ok((
            vec![curve.min_bits(); d],
            SolveSummary::trivial(0.0, curve.min_bits() as f64),
        ));
    }
    let sol = mckp_bisect(&weights.values, curve, target, config)?;
    let summary = SolveSummary::from(&sol);
    Ok((sol.bits, summary))
}

/// Allocation of one `(layer, kv_head)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAllocation {
    pub layer: usize,
    pub head: usize,
    pub v_bits: Vec<u8>,
    pub k_bits: Vec<u8>,
    pub kept: KeptSets,
    pub token_weights: Vec<f64>,
    pub channel_weights: Vec<f64>,
    pub objective_v: f64,
    pub objective_k: f64,
    /// Bits actually spent: `d·Σ b_t + |kept|·Σ b_c`.
    pub achieved_bits: f64,
    pub budget: HeadBudget,
    pub v_solve: SolveSummary,
    pub k_solve: SolveSummary,
}

impl HeadAllocation {
    pub fn v_bits_spent(&self) -> f64 {
        let d = self.k_bits.len() as f64;
        d * self.v_bits.iter().map(|&b| b as f64).sum::<f64>()
    }

    pub fn k_bits_spent(&self) -> f64 {
        self.kept.kept.len() as f64 * self.k_bits.iter().map(|&b| b as f64).sum::<f64>()
    }
}

/// Stage 1 weights of one head: pooled token mass and channel norms.
pub fn head_weights(
    cache: &KvCache,
    layer: usize,
    head: usize,
    probe: &ProbeConfig,
) -> Result<(WeightVector, WeightVector)> {
    probe.validate()?;
    let shape = cache.shape();
    let d = shape.head_dim;
    let g = shape.group();
    let keys = cache.keys(layer, head);
    let offsets = cache.probe_offsets();
    let attn = (head * g..(head + 1) * g)
        .map(|qh| attention_probe(cache.probe_queries(layer, qh), keys, d, &offsets))
        .collect::<Result<Vec<_>>>()?;
    let tokens = token_weights(&attn, g, probe.pool_kernel)?;
    let channels = channel_weights(cache.group_queries(layer, head), keys, d)?;
    Ok((tokens, channels))
}

/// Runs stages 1–3 for one head.
pub fn allocate_head(
    cache: &KvCache,
    layer: usize,
    head: usize,
    spec: &BudgetSpec,
    tables: &Tables,
    config: &PipelineConfig,
) -> Result<HeadAllocation> {
    let shape = cache.shape();
    if layer >= shape.layers || head >= shape.kv_heads {
        return shape_err(format!("no head ({layer}, {head}) in cache"));
    }
    let budget = head_budget(spec, shape.head_dim, shape.kv_heads)?;
    let curve_v = RateCurve::from_table(&tables.v, &spec.bits)?;
    let curve_k = RateCurve::from_table(&tables.k, &spec.bits)?;
    let (w_t, w_c) = head_weights(cache, layer, head, &config.probe)?;

    let retained: Vec<usize> = if config.force_window_retain {
        cache.probe_offsets()
    } else {
        Vec::new()
    };
    let v = allocate_v(
        &w_t,
        &curve_v,
        budget.v_bits,
        shape.head_dim,
        &retained,
        &config.solver,
    )?;
    // Channel weights from stage 1 are reused as-is after eviction.
    let (k_bits, k_solve) = allocate_k(
        &w_c,
        &curve_k,
        budget.k_bits,
        v.kept.kept.len(),
        &config.solver,
    )?;

    let objective_v = objective(&w_t.values, &curve_v, &v.bits)?;
    let objective_k = objective(&w_c.values, &curve_k, &k_bits)?;
    let mut alloc = HeadAllocation {
        layer,
        head,
        v_bits: v.bits,
        k_bits,
        kept: v.kept,
        token_weights: w_t.values,
        channel_weights: w_c.values,
        objective_v,
        objective_k,
        achieved_bits: 0.0,
        budget,
        v_solve: v.summary,
        k_solve,
    };
    alloc.achieved_bits = alloc.v_bits_spent() + alloc.k_bits_spent();
    Ok(alloc)
}

/// Allocations for every head of a cache, ordered by `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAllocation {
    pub version: u32,
    pub spec: BudgetSpec,
    pub config: PipelineConfig,
    pub heads: Vec<HeadAllocation>,
}

impl ModelAllocation {
    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadAllocation> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
    }

    pub fn total_achieved_bits(&self) -> f64 {
        self.heads.iter().map(|h| h.achieved_bits).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let alloc: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if alloc.version != 1 {
            return Err(RdkvError::Format(format!(
                "unsupported allocation version {}",
                alloc.version
            )));
        }
        Ok(alloc)
    }
}

/// Runs [`allocate_head`] for every `(layer, head)` in parallel.
///
/// Heads are independent; results are collected in key order, so the output
/// does not depend on scheduling.
pub fn allocate_model(
    cache: &KvCache,
    spec: &BudgetSpec,
    tables: &Tables,
    config: &PipelineConfig,
) -> Result<ModelAllocation> {
    let shape = cache.shape();
    let keys: Vec<(usize, usize)> = (0..shape.layers)
        .flat_map(|l| (0..shape.kv_heads).map(move |h| (l, h)))
        .collect();
    let heads = keys
        .par_iter()
        .map(|&(l, h)| allocate_head(cache, l, h, spec, tables, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelAllocation {
        version: 1,
        spec: spec.clone(),
        config: *config,
        heads,
    })
}
