//! Distortion weights for V tokens and K channels.
//!
//! A token's weight is the attention mass it receives (the total-variation
//! shift caused by evicting it). A channel's weight is the norm of the
//! rank-one logit perturbation caused by zeroing it.

use serde::{Deserialize, Serialize};

use crate::cache::AttentionMatrix;
use crate::error::{arg_err, shape_err, RdkvError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Token,
    Channel,
}

/// Nonnegative per-unit distortion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub kind: UnitKind,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn new(kind: UnitKind, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RdkvError::Numeric(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { kind, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Column sums of the attention rows of every query head in a KV group, before pooling.
pub fn raw_token_mass(attn: &[AttentionMatrix], group: usize) -> Result<Vec<f64>> {
    if group == 0 || attn.is_empty() || attn.len() % group != 0 {
        return arg_err(format!(
            "group size {group} does not divide {} attention heads",
            attn.len()
        ));
    }
    let t = attn[0].cols();
    if attn.iter().any(|a| a.cols() != t) {
        return shape_err("attention heads disagree on token count");
    }
    let mut raw = vec![0.0; t];
    for a in attn {
        for row in a.as_slice().chunks_exact(t) {
            for (r, &p) in raw.iter_mut().zip(row) {
                *r += p;
            }
        }
    }
    Ok(raw)
}

/// Same-length centered moving average with zero padding (`pad = kernel / 2`).
pub fn avg_pool(raw: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 {
        return arg_err(format!("pool kernel must be odd, got {kernel}"));
    }
    let half = kernel / 2;
    let n = raw.len();
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            raw[lo..hi].iter().sum::<f64>() / kernel as f64
        })
        .collect())
}

/// Per-token V weights: summed attention mass over the group, then pooled.
pub fn token_weights(
    attn: &[AttentionMatrix],
    group: usize,
    pool_kernel: usize,
) -> Result<WeightVector> {
    let raw = raw_token_mass(attn, group)?;
    WeightVector::new(UnitKind::Token, avg_pool(&raw, pool_kernel)?)
}

/// Total-variation distance between an attention row and its renormalization after evicting `t`.
///
/// Builds the renormalized row explicitly and sums the absolute differences.
pub fn tv_after_evict(row: &[f64], t: usize) -> Result<f64> {
    let Some(&evicted) = row.get(t) else {
        return shape_err(format!("index {t} outside row of length {}", row.len()));
    };
    if evicted >= 1.0 {
        return Err(RdkvError::DegenerateRow { index: t });
    }
    let keep = 1.0 - evicted;
    let tv: f64 = row
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let renorm = if i == t { 0.0 } else { a / keep };
            (a - renorm).abs()
        })
        .sum();
    Ok(0.5 * tv)
}

fn check_qk(queries: &[f32], keys: &[f32], head_dim: usize) -> Result<()> {
    if head_dim == 0 || queries.len() % head_dim != 0 || keys.len() % head_dim != 0 {
        return shape_err("query/key lengths are not multiples of head_dim");
    }
    Ok(())
}

fn column_norm(m: &[f32], head_dim: usize, c: usize) -> f64 {
    m.chunks_exact(head_dim)
        .map(|row| (row[c] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-channel K weights `‖Q[:,c]‖·‖K[:,c]‖/√d`.
pub fn channel_weights(queries: &[f32], keys: &[f32], head_dim: usize) -> Result<WeightVector> {
    check_qk(queries, keys, head_dim)?;
    let inv_sqrt_d = 1.0 / (head_dim as f64).sqrt();
    let values = (0..head_dim)
        .map(|c| column_norm(queries, head_dim, c) * column_norm(keys, head_dim, c) * inv_sqrt_d)
        .collect();
    WeightVector::new(UnitKind::Channel, values)
}

/// The logit perturbation `δZ = -(1/√d)·Q[:,c]·K[:,c]ᵀ`, materialized `[rows × T]`.
#[derive(Debug, Clone)]
pub struct LogitDeviation {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitDeviation {
    pub fn new(queries: &[f32], keys: &[f32], head_dim: usize, channel: usize) -> Result<Self> {
        check_qk(queries, keys, head_dim)?;
        if channel >= head_dim {
            return shape_err(format!("channel {channel} outside head_dim {head_dim}"));
        }
        let scale = -1.0 / (head_dim as f64).sqrt();
        let qc: Vec<f64> = queries.chunks_exact(head_dim).map(|r| r[channel] as f64).collect();
        let kc: Vec<f64> = keys.chunks_exact(head_dim).map(|r| r[channel] as f64).collect();
        let data = qc
            .iter()
            .flat_map(|&q| kc.iter().map(move |&k| scale * q * k))
            .collect();
        Ok(Self {
            rows: qc.len(),
            cols: kc.len(),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest singular value by power iteration on `δZᵀδZ`.
    pub fn spectral_norm(&self) -> Result<f64> {
        const TOL: f64 = 1e-10;
        const MAX_ITER: usize = 10_000;
        if self.data.iter().all(|&x| x == 0.0) {
            return Ok(0.0);
        }
        // Fixed, non-degenerate start vector; retried with a shifted pattern
        // if it happens to be orthogonal to the dominant direction.
        for attempt in 0..4u32 {
            let mut x: Vec<f64> = (0..self.cols)
                .map(|j| 1.0 + ((j as f64 + 1.0) * (0.618_034 + attempt as f64)).sin())
                .collect();
            normalize(&mut x);
            let mut sigma = 0.0;
            for _ in 0..MAX_ITER {
                let y = self.mul(&x);
                let mut z = self.mul_t(&y);
                let norm = normalize(&mut z);
                if norm == 0.0 {
                    break;
                }
                let next = norm.sqrt();
                x = z;
                if (next - sigma).abs() <= TOL * next {
                    return Ok(next);
                }
                sigma = next;
            }
            if sigma > 0.0 {
                return Err(RdkvError::Numeric(
                    "power iteration did not converge".into(),
                ));
            }
        }
        Err(RdkvError::Numeric(
            "power iteration start vectors were all orthogonal to the range".into(),
        ))
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mul_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

/// Spectral norm of the logit perturbation from zeroing channel `c`.
pub fn logit_deviation_norm(
    queries: &[f32],
    keys: &[f32],
    head_dim: usize,
    channel: usize,
) -> Result<f64> {
    LogitDeviation::new(queries, keys, head_dim, channel)?.spectral_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_row(row: Vec<f64>) -> AttentionMatrix {
        let n = row.len();
        AttentionMatrix::from_rows(1, n, row).unwrap()
    }

    #[test]
    fn identity_pooling_keeps_row() {
        let w = token_weights(&[single_row(vec![0.5, 0.3, 0.2])], 1, 1).unwrap();
        assert_eq!(w.values, vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn identical_rows_sum() {
        let a = AttentionMatrix::from_rows(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(token_weights(&[a], 1, 1).unwrap().values, vec![1.0, 1.0]);
    }

    #[test]
    fn pooling_uses_zero_padding() {
        let pooled = avg_pool(&[0.0, 3.0, 0.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(pooled, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(avg_pool(&[1.0], 2).is_err());
    }

    #[test]
    fn group_must_divide_heads() {
        let a = single_row(vec![1.0]);
        assert!(token_weights(&[a.clone(), a.clone(), a], 2, 1).is_err());
    }

    #[test]
    fn tv_examples() {
        assert!((tv_after_evict(&[0.5, 0.3, 0.2], 1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(tv_after_evict(&[0.0, 1.0, 0.0], 0).unwrap(), 0.0);
        assert!(matches!(
            tv_after_evict(&[0.0, 1.0], 1),
            Err(RdkvError::DegenerateRow { index: 1 })
        ));
    }

    #[test]
    fn channel_weight_norm_product() {
        // d = 4; channel 0 has Q column [3,4] and K column [2,0].
        let q = [3.0f32, 1.0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0];
        let k = [2.0f32, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let w = channel_weights(&q, &k, 4).unwrap();
        assert!((w.values[0] - 5.0).abs() < 1e-12);
        assert_eq!(w.values[2], 0.0);
        assert!(channel_weights(&q[..7], &k, 4).is_err());
    }

    #[test]
    fn rank_one_singular_value() {
        // With d = 1, δZ = -Q[:,0]·K[:,0]ᵀ.
        let q = [2.0f32, 0.0]; // ‖u‖ = 2
        let k = [1.0f32, 2.0, 2.0]; // ‖v‖ = 3
        let s = logit_deviation_norm(&q, &k, 1, 0).unwrap();
        assert!((s - 6.0).abs() < 1e-9);
        assert_eq!(logit_deviation_norm(&q, &[0.0; 3], 1, 0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn tv_equals_evicted_mass(raw in prop::collection::vec(0.01f64..1.0, 2..32), pick in 0usize..32) {
            let sum: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let t = pick % row.len();
            let tv = tv_after_evict(&row, t).unwrap();
            prop_assert!((tv - row[t]).abs() < 1e-12);
        }

        #[test]
        fn weights_ignore_query_row_order(vals in prop::collection::vec(0.01f64..1.0, 12), rot in 0usize..3) {
            let rows: Vec<Vec<f64>> = vals.chunks(4).map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            }).collect();
            let flat: Vec<f64> = rows.concat();
            let mut rotated = rows.clone();
            rotated.rotate_left(rot);
            let a = AttentionMatrix::from_rows(3, 4, flat).unwrap();
            let b = AttentionMatrix::from_rows(3, 4, rotated.concat()).unwrap();
            let wa = raw_token_mass(&[a], 1).unwrap();
            let wb = raw_token_mass(&[b], 1).unwrap();
            for (x, y) in wa.iter().zip(&wb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            // Before pooling every row contributes exactly one unit of mass.
            prop_assert!((wa.iter().sum::<f64>() - 3.0).abs() < 1e-4);
        }
    }
}
