//! Bit allocation: continuous reverse water-filling and the discrete
//! multiple-choice knapsack solved by Lagrangian bisection.
//!
//! Every unit `u` picks one level from a [`RateCurve`] to minimize
//! `Σ w_u ε(b_u)` subject to `Σ b_u ≤ B`. For a price `λ ≥ 0` the relaxed
//! problem decouples into independent per-unit lookups, and
//! `g(λ) = Σ_u min_b [w_u ε(b) + λ b] - λ B` lower-bounds the optimum.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, RdkvError, Result};
use crate::quantizer::{BitSet, DistortionTable};

/// Units above this count are refused by [`mckp_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 12;

/// Allowed bit-widths paired with their normalized distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    bits: Vec<u8>,
    eps: Vec<f64>,
}

impl RateCurve {
    /// `bits` strictly increasing, `eps` strictly decreasing and nonnegative.
    pub fn new(bits: Vec<u8>, eps: Vec<f64>) -> Result<Self> {
        if bits.is_empty() || bits.len() != eps.len() {
            return arg_err("rate curve needs matching, nonempty bits and eps");
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return arg_err("rate curve bits must be strictly increasing");
        }
        if eps.iter().any(|e| !e.is_finite() || *e < 0.0) || eps.windows(2).any(|w| w[0] <= w[1])
        {
            return arg_err("rate curve distortion must be strictly decreasing and nonnegative");
        }
        Ok(Self { bits, eps })
    }

    /// Restricts a calibrated table to an action set.
    pub fn from_table(table: &DistortionTable, bits: &BitSet) -> Result<Self> {
        let eps = bits
            .widths()
            .iter()
            .map(|&b| {
                table.get(b).ok_or_else(|| {
                    RdkvError::InvalidArgument(format!("distortion table has no entry for {b} bits"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits.widths().to_vec(), eps)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn min_bits(&self) -> u8 {
        self.bits[0]
    }

    pub fn max_bits(&self) -> u8 {
        *self.bits.last().unwrap()
    }

    pub fn eps_of(&self, bits: u8) -> Option<f64> {
        self.bits.iter().position(|&b| b == bits).map(|i| self.eps[i])
    }

    /// Level index minimizing `w ε(b) + λ b`, ties toward fewer bits.
    fn argmin(&self, w: f64, lambda: f64) -> usize {
        if lambda.is_infinite() {
            return 0;
        }
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for (i, (&b, &e)) in self.bits.iter().zip(&self.eps).enumerate() {
            let cost = w * e + lambda * b as f64;
            if cost < best_cost {
                best = i;
                best_cost = cost;
            }
        }
        best
    }
}

/// Parameters of the Lagrangian bisection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative tolerance on the average bit-width.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Accept only allocations at or under the budget.
    pub strict: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-2,
            max_iterations: 64,
            strict: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return arg_err("solver tolerance must be positive and max_iterations at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAllocation {
    pub bits: Vec<f64>,
    pub lambda: f64,
    pub budget_used: f64,
}

/// Reverse water-filling `b_u = [log₂(ln2·c_u/λ)]₊` with `Σ b_u = B`.
///
/// The active set is found by sorting coefficients and growing it while the
/// smallest active coefficient stays above the water level `λ/ln2`; on a
/// fixed active set `λ` has a closed form.
pub fn waterfill_continuous(coeffs: &[f64], budget: f64) -> Result<ContinuousAllocation> {
    if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return arg_err("water-filling coefficients must be finite and nonnegative");
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return arg_err("water-filling budget must be positive");
    }
    let mut order: Vec<usize> = (0..coeffs.len()).filter(|&i| coeffs[i] > 0.0).collect();
    if order.is_empty() {
        return arg_err("all water-filling coefficients are zero");
    }
    order.sort_by(|&a, &b| coeffs[b].total_cmp(&coeffs[a]));

    let levels: Vec<f64> = order.iter().map(|&i| (LN_2 * coeffs[i]).log2()).collect();
    let mut prefix = 0.0;
    let mut active = 0;
    let mut log_lambda = 0.0;
    for (k, &lvl) in levels.iter().enumerate() {
        let candidate = (prefix + lvl - budget) / (k + 1) as f64;
        if lvl <= candidate {
            break;
        }
        prefix += lvl;
        active = k + 1;
        log_lambda = candidate;
    }
    let mut bits = vec![0.0; coeffs.len()];
    for (&i, &lvl) in order.iter().zip(&levels).take(active) {
        bits[i] = lvl - log_lambda;
    }
    Ok(ContinuousAllocation {
        budget_used: bits.iter().sum(),
        bits,
        lambda: log_lambda.exp2(),
    })
}

/// `argmin_{b} w ε(b) + λ b` over the curve, ties broken toward fewer bits.
pub fn per_unit_argmin(weight: f64, curve: &RateCurve, lambda: f64) -> u8 {
    curve.bits[curve.argmin(weight, lambda)]
}

/// Result of a discrete allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteAllocation {
    pub bits: Vec<u8>,
    /// Price at which the allocation was read off; `None` for exhaustive search.
    pub lambda: Option<f64>,
    pub target_avg_bits: f64,
    pub achieved_avg_bits: f64,
    pub objective: f64,
    /// Whether the average landed within tolerance of the target.
    pub converged: bool,
    pub iterations: usize,
}

fn allocate_at(weights: &[f64], curve: &RateCurve, lambda: f64) -> Vec<u8> {
    weights.iter().map(|&w| per_unit_argmin(w, curve, lambda)).collect()
}

fn mean_bits(bits: &[u8]) -> f64 {
    bits.iter().map(|&b| b as f64).sum::<f64>() / bits.len() as f64
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return arg_err("allocation needs at least one unit");
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(RdkvError::Numeric(
            "weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// `Σ w_u ε(b_u)`.
pub fn objective(weights: &[f64], curve: &RateCurve, bits: &[u8]) -> Result<f64> {
    if weights.len() != bits.len() {
        return shape_err(format!(
            "{} weights but {} bit-widths",
            weights.len(),
            bits.len()
        ));
    }
    weights
        .iter()
        .zip(bits)
        .map(|(&w, &b)| {
            curve
                .eps_of(b)
                .map(|e| w * e)
                .ok_or_else(|| RdkvError::InvalidArgument(format!("{b} bits not in the curve")))
        })
        .sum()
}

fn finish(
    weights: &[f64],
    curve: &RateCurve,
    bits: Vec<u8>,
    lambda: Option<f64>,
    target: f64,
    converged: bool,
    iterations: usize,
) -> DiscreteAllocation {
    let objective = objective(weights, curve, &bits).expect("bits come from the curve");
    DiscreteAllocation {
        achieved_avg_bits: mean_bits(&bits),
        bits,
        lambda,
        target_avg_bits: target,
        objective,
        converged,
        iterations,
    }
}

/// Lagrangian bisection on `λ` until the mean bit-width is within tolerance of the target.
///
/// `λ` starts bracketed by `[0, max w]`; the upper end is doubled until the
/// allocation it induces fits the target. If no iterate meets the tolerance
/// the last one is returned with `converged = false`. In strict mode only
/// iterates at or below the target count as converged, and the fallback is
/// the allocation at the feasible end of the bracket.
pub fn mckp_bisect(
    weights: &[f64],
    curve: &RateCurve,
    target_avg_bits: f64,
    config: &SolverConfig,
) -> Result<DiscreteAllocation> {
    check_weights(weights)?;
    config.validate()?;
    if !(target_avg_bits > 0.0 && target_avg_bits <= 16.0) {
        return arg_err(format!(
            "target average bits {target_avg_bits} outside (0, 16]"
        ));
    }
    let target = target_avg_bits;
    let max_bits = curve.max_bits() as f64;
    if target >= max_bits {
        let bits = vec![curve.max_bits(); weights.len()];
        return Ok(finish(weights, curve, bits, Some(0.0), target, true, 0));
    }
    if target < curve.min_bits() as f64 {
        let bits = vec![curve.min_bits(); weights.len()];
        return Ok(finish(weights, curve, bits, Some(f64::INFINITY), target, false, 0));
    }

    let mut lo = 0.0f64;
    let mut hi = weights.iter().copied().fold(0.0, f64::max);
    if hi <= 0.0 {
        hi = 1.0;
    }
    while mean_bits(&allocate_at(weights, curve, hi)) > target && hi.is_finite() {
        hi *= 2.0;
    }

    let accept = |avg: f64| {
        let rel = (avg - target).abs() / target;
        rel < config.tolerance && (!config.strict || avg <= target)
    };
    let mut last = (hi, allocate_at(weights, curve, hi));
    for i in 1..=config.max_iterations {
        let lambda = 0.5 * (lo + hi);
        let bits = allocate_at(weights, curve, lambda);
        let avg = mean_bits(&bits);
        if accept(avg) {
            return Ok(finish(weights, curve, bits, Some(lambda), target, true, i));
        }
        if avg > target {
            lo = lambda;
        } else {
            hi = lambda;
        }
        last = (lambda, bits);
    }
    let (mut lambda, mut bits) = last;
    if config.strict && mean_bits(&bits) > target {
        lambda = hi;
        bits = allocate_at(weights, curve, hi);
    }
    Ok(finish(
        weights,
        curve,
        bits,
        Some(lambda),
        target,
        false,
        config.max_iterations,
    ))
}

/// Lagrangian lower bound paired with the primal value of the allocation at the same `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualBound {
    pub lambda: f64,
    pub g_lambda: f64,
    pub primal: f64,
    /// `Σ b_u(λ) ≤ B`.
    pub feasible: bool,
    pub gap: f64,
}

/// Evaluates `g(λ)` and the primal objective of the per-unit minimizers at `λ`.
pub fn dual_bound(
    weights: &[f64],
    curve: &RateCurve,
    lambda: f64,
    total_budget: f64,
) -> Result<DualBound> {
    check_weights(weights)?;
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return arg_err(format!("lambda must be finite and nonnegative, got {lambda}"));
    }
    let bits = allocate_at(weights, curve, lambda);
    let primal = objective(weights, curve, &bits)?;
    let used: f64 = bits.iter().map(|&b| b as f64).sum();
    // Σ_u min_b [w ε(b) + λb] - λB, regrouped so that a zero-gap bound
    // reproduces the primal sum bit for bit.
    let g_lambda = primal + lambda * (used - total_budget);
    Ok(DualBound {
        lambda,
        g_lambda,
        primal,
        feasible: used <= total_budget,
        gap: primal - g_lambda,
    })
}

/// Maximizes the concave dual `g` over `λ ≥ 0`, giving the tightest Lagrangian lower bound.
///
/// The maximizer is where the supergradient `Σ b_u(λ) - B` changes sign,
/// located by bisection. The returned bound carries the feasible side's primal.
pub fn best_dual_bound(weights: &[f64], curve: &RateCurve, total_budget: f64) -> Result<DualBound> {
    check_weights(weights)?;
    let used = |lambda: f64| -> f64 {
        allocate_at(weights, curve, lambda)
            .iter()
            .map(|&b| b as f64)
            .sum()
    };
    if used(0.0) <= total_budget {
        return dual_bound(weights, curve, 0.0, total_budget);
    }
    let mut lo = 0.0f64;
    let mut hi = weights.iter().copied().fold(0.0, f64::max).max(1e-300);
    while used(hi) > total_budget && hi.is_finite() {
        hi *= 2.0;
    }
    if !hi.is_finite() {
        // Even the cheapest level overruns the budget; the dual is unbounded above.
        return Err(RdkvError::InvalidArgument(
            "budget is below the cheapest allocation".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if used(mid) > total_budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let at_hi = dual_bound(weights, curve, hi, total_budget)?;
    let at_lo = dual_bound(weights, curve, lo, total_budget)?;
    Ok(DualBound {
        g_lambda: at_hi.g_lambda.max(at_lo.g_lambda),
        gap: at_hi.primal - at_hi.g_lambda.max(at_lo.g_lambda),
        ..at_hi
    })
}

/// Exact optimum by exhaustive depth-first search, for small instances.
///
/// Units are assigned in index order with levels in increasing bit order and
/// only strict improvements are kept, so ties resolve to the
/// lexicographically smallest bit vector.
pub fn mckp_bruteforce(
    weights: &[f64],
    curve: &RateCurve,
    total_budget: f64,
) -> Result<DiscreteAllocation> {
    check_weights(weights)?;
    let n = weights.len();
    if n > BRUTEFORCE_LIMIT {
        return Err(RdkvError::TooLarge {
            units: n,
            limit: BRUTEFORCE_LIMIT,
        });
    }
    let min_bits = curve.min_bits() as f64;
    if n as f64 * min_bits > total_budget {
        return arg_err("budget is below the cheapest allocation");
    }

    struct Search<'a> {
        weights: &'a [f64],
        curve: &'a RateCurve,
        budget: f64,
        min_bits: f64,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, unit: usize, used: f64, cost: f64) {
            if let Some((best, _)) = &self.best {
                if cost >= *best {
                    return;
                }
            }
            if unit == self.weights.len() {
                self.best = Some((cost, self.current.clone()));
                return;
            }
            let remaining = (self.weights.len() - unit - 1) as f64 * self.min_bits;
            for level in 0..self.curve.bits.len() {
                let b = self.curve.bits[level] as f64;
                if used + b + remaining > self.budget {
                    break;
                }
                self.current[unit] = level;
                let c = cost + self.weights[unit] * self.curve.eps[level];
                self.visit(unit + 1, used + b, c);
            }
        }
    }

    let mut search = Search {
        weights,
        curve,
        budget: total_budget,
        min_bits,
        current: vec![0; n],
        best: None,
    };
    search.visit(0, 0.0, 0.0);
    let (_, levels) = search.best.expect("the all-minimum allocation is feasible");
    let bits: Vec<u8> = levels.iter().map(|&l| curve.bits[l]).collect();
    Ok(finish(
        weights,
        curve,
        bits,
        None,
        total_budget / n as f64,
        true,
        0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_curve() -> RateCurve {
        RateCurve::new(vec![0, 2, 4, 8, 16], vec![1.0, 0.3, 0.014, 5e-5, 0.0]).unwrap()
    }

    #[test]
    fn curve_validation() {
        assert!(RateCurve::new(vec![0, 2], vec![1.0, 1.0]).is_err());
        assert!(RateCurve::new(vec![2, 0], vec![1.0, 0.5]).is_err());
        assert!(RateCurve::new(vec![0], vec![]).is_err());
        let table = DistortionTable::from_quantized(
            crate::weights::UnitKind::Token,
            0.3,
            0.014,
            5e-5,
            "fixture",
        )
        .unwrap();
        let tri = RateCurve::from_table(&table, &BitSet::tri_state()).unwrap();
        assert_eq!(tri.bits(), &[0, 4, 16]);
        assert_eq!(tri.eps(), &[1.0, 0.014, 0.0]);
    }

    #[test]
    fn waterfill_two_unit_closed_form() {
        let a = waterfill_continuous(&[4.0, 1.0], 4.0).unwrap();
        assert!((a.bits[0] - 3.0).abs() < 1e-9 * 3.0);
        assert!((a.bits[1] - 1.0).abs() < 1e-9);
        assert!((a.lambda - LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn waterfill_drops_unit_below_water_level() {
        let a = waterfill_continuous(&[8.0, 4.0, 1e-6], 6.0).unwrap();
        assert!((a.bits[0] - 3.5).abs() < 1e-9);
        assert!((a.bits[1] - 2.5).abs() < 1e-9);
        assert_eq!(a.bits[2], 0.0);
        assert!((a.lambda / LN_2 - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn waterfill_single_unit_takes_budget() {
        let a = waterfill_continuous(&[0.37], 7.0).unwrap();
        assert!((a.bits[0] - 7.0).abs() < 1e-12);
        assert!(waterfill_continuous(&[0.0, 0.0], 1.0).is_err());
        assert!(waterfill_continuous(&[1.0], 0.0).is_err());
    }

    #[test]
    fn argmin_limits_and_example() {
        let curve = fixture_curve();
        assert_eq!(per_unit_argmin(3.0, &curve, 0.0), 16);
        assert_eq!(per_unit_argmin(3.0, &curve, f64::INFINITY), 0);
        assert_eq!(per_unit_argmin(3.0, &curve, 1e9), 0);
        // Costs: 1, 0.32, 0.054, 0.08005, 0.16.
        assert_eq!(per_unit_argmin(1.0, &curve, 0.01), 4);
        // Zero weight: every level costs λb, so eviction wins for any λ > 0.
        assert_eq!(per_unit_argmin(0.0, &curve, 1e-9), 0);
    }

    #[test]
    fn argmin_breaks_ties_downward() {
        // w·ε(0) = 1 and w·ε(2) + 2λ = 0.5 + 0.5 = 1.
        let curve = RateCurve::new(vec![0, 2, 16], vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!(per_unit_argmin(1.0, &curve, 0.25), 0);
    }

    #[test]
    fn bruteforce_small_instance() {
        let curve = fixture_curve();
        let opt = mckp_bruteforce(&[10.0, 1.0, 0.1], &curve, 12.0).unwrap();
        assert_eq!(opt.bits, vec![8, 4, 0]);
        assert!((opt.objective - 0.1145).abs() < 1e-12);
        assert!(mckp_bruteforce(&[1.0; 13], &curve, 100.0).is_err());
    }

    #[test]
    fn bisection_on_small_instance_hits_duality_gap() {
        // No price reproduces the optimum [8, 4, 0]: unit 10 drops from 8 to 4
        // bits at λ = 0.034875, before unit 0.1 is evicted at λ = 0.035.
        let curve = fixture_curve();
        let w = [10.0, 1.0, 0.1];
        let res = mckp_bisect(&w, &curve, 4.0, &SolverConfig::default()).unwrap();
        assert!(!res.converged);
        assert!(res.bits == vec![8, 4, 2] || res.bits == vec![4, 4, 2]);
        let strict = SolverConfig { strict: true, ..SolverConfig::default() };
        let res = mckp_bisect(&w, &curve, 4.0, &strict).unwrap();
        assert_eq!(res.bits, vec![4, 4, 2]);
        let bound = dual_bound(&w, &curve, res.lambda.unwrap(), 12.0).unwrap();
        assert!(bound.feasible);
        assert!(bound.g_lambda <= 0.1145 + 1e-12);
        assert!(bound.primal >= 0.1145);
    }

    #[test]
    fn bisection_saturated_and_starved() {
        let curve = fixture_curve();
        let w = [2.0; 6];
        let full = mckp_bisect(&w, &curve, 16.0, &SolverConfig::default()).unwrap();
        assert_eq!(full.bits, vec![16; 6]);
        assert_eq!(full.objective, 0.0);
        let strict = SolverConfig { strict: true, ..SolverConfig::default() };
        let none = mckp_bisect(&w, &curve, 1e-6, &strict).unwrap();
        assert_eq!(none.bits, vec![0; 6]);
        assert!((none.objective - 12.0).abs() < 1e-12);
        assert!(mckp_bisect(&w, &curve, 0.0, &strict).is_err());
        assert!(mckp_bisect(&w, &curve, 16.5, &strict).is_err());
    }

    #[test]
    fn bisection_converges_on_spread_weights() {
        let curve = fixture_curve();
        let w: Vec<f64> = (0..400).map(|i| (-(i as f64) / 40.0).exp()).collect();
        let res = mckp_bisect(&w, &curve, 4.0, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!((res.achieved_avg_bits - 4.0).abs() / 4.0 < 1e-2);
        assert!((objective(&w, &curve, &res.bits).unwrap() - res.objective).abs() < 1e-9);
    }

    #[test]
    fn quant_only_below_two_bits_is_flagged() {
        let curve = RateCurve::new(vec![2, 4, 8, 16], vec![0.3, 0.014, 5e-5, 0.0]).unwrap();
        let res = mckp_bisect(&[1.0, 2.0], &curve, 1.0, &SolverConfig::default()).unwrap();
        assert!(!res.converged);
        assert_eq!(res.bits, vec![2, 2]);
    }

    #[test]
    fn dual_at_zero_price() {
        let curve = fixture_curve();
        let b = dual_bound(&[1.0, 2.0], &curve, 0.0, 10.0).unwrap();
        assert_eq!((b.g_lambda, b.primal, b.feasible), (0.0, 0.0, false));
        let b = dual_bound(&[1.0, 2.0], &curve, 0.0, 32.0).unwrap();
        assert!(b.feasible);
    }

    #[test]
    fn objective_checks_lengths() {
        let curve = fixture_curve();
        assert_eq!(objective(&[1.0, 2.0], &curve, &[16, 16]).unwrap(), 0.0);
        assert_eq!(objective(&[1.0, 2.0], &curve, &[0, 0]).unwrap(), 3.0);
        assert!(objective(&[1.0], &curve, &[0, 0]).is_err());
        assert!(objective(&[1.0], &curve, &[3]).is_err());
    }
}
