//! Explicit constants of the contraction estimates and searches for
//! admissible `L` and `A`.

use crate::error::{invalid, Result};
use crate::polymers::{n_constants, Adjacency, NConstants};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerInput {
    pub d: usize,
    pub l: u64,
    /// Large-set weight `A`.
    pub a: f64,
    pub h: f64,
    /// Regulator constant `q`, an external input.
    pub q: f64,
    /// External field points.
    pub m: usize,
    /// Flow radius.
    pub r: f64,
    pub epsilon: f64,
    pub adjacency: Adjacency,
    /// Scales reported for the `j`-dependent bound.
    pub scales: usize,
}

impl Default for LedgerInput {
    fn default() -> Self {
        LedgerInput { d: 3, l: 65, a: 16.0, h: 1.0, q: 1.0, m: 2, r: 0.1, epsilon: 0.1, adjacency: Adjacency::King, scales: 5 }
    }
}

impl LedgerInput {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("dimension must be positive");
        }
        if self.l < 3 || self.l % 2 == 0 {
            return invalid("L must be odd and at least 3");
        }
        if !(self.a > 2.0) {
            return invalid("A must exceed 2");
        }
        if !(self.q >= 1.0) {
            return invalid("q must be at least 1");
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return invalid("r must lie in (0, 1)");
        }
        if !(self.h > 0.0) {
            return invalid("h must be positive");
        }
        Ok(())
    }
}

/// The large-set bracket `sup_U A^{|U|} Σ_{X ∉ S, X̄ = U} (A/2)^{−|X|}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LargeSetEstimate {
    /// An over-estimate, `+∞` when the bound does not converge.
    pub value: f64,
    /// Largest `|U|` summed explicitly.
    pub u_cutoff: usize,
    /// Geometric ratio of the tail in `|U|`; the tail is summable below 1.
    pub tail_ratio: f64,
    /// The growth rate of connected sets that was assumed, `e(Δ − 1)`.
    pub growth: f64,
    /// Never set: the minimal size of a set reaching `u` blocks is a
    /// geometric estimate rather than a proven bound.
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    pub input: LedgerInput,
    pub n1: f64,
    pub n2: f64,
    pub l2_bulk: f64,
    pub l2_field: f64,
    pub l3_prime: f64,
    /// Worst case `j = 0`.
    pub l4: f64,
    /// `(j, bound)` for `j = 0..scales`.
    pub l4_per_scale: Vec<(usize, f64)>,
    pub delta: f64,
    pub l1: LargeSetEstimate,
    /// Sum of the explicit bounds, without the large-set estimate.
    pub total: f64,
    pub contracts: bool,
}

fn coordination(d: usize, adj: Adjacency) -> f64 {
    match adj {
        Adjacency::King => 3f64.powi(d as i32) - 1.0,
        Adjacency::Face => 2.0 * d as f64,
    }
}

/// Fewest `j`-blocks in a connected non-small set whose closure has `u`
/// blocks: at least `u`, more than `2^d`, and one crossing of width `L − 2`
/// for every cluster of `2^d` parents beyond the first.
fn min_blocks(d: usize, l: u64, u: usize) -> usize {
    let clusters = u.div_ceil(1 << d);
    ((1usize << d) + 1).max(u + (clusters - 1) * (l as usize - 2))
}

/// Head summed for `|U| ≤ cutoff` with the animal bound
/// `c_n ≤ (e(Δ−1))^{n−1}` and `u L^d` anchors; the tail in `|U|` is
/// geometric once the crossing cost dominates.
pub fn large_set_estimate(d: usize, l: u64, a: f64, adj: Adjacency) -> LargeSetEstimate {
    let mu = std::f64::consts::E * (coordination(d, adj) - 1.0);
    let rho = 2.0 * mu / a;
    let ld = (l as f64).powi(d as i32);
    let cluster = 1usize << d;
    let u_cutoff = 64 * cluster;
    let growth = mu;
    if rho >= 1.0 {
        return LargeSetEstimate { value: f64::INFINITY, u_cutoff, tail_ratio: f64::INFINITY, growth, certified: false };
    }
    let ln_term = |u: usize| {
        let n0 = min_blocks(d, l, u) as f64;
        u as f64 * a.ln() + (u as f64).ln() + ld.ln() - mu.ln() + n0 * rho.ln() - (1.0 - rho).ln()
    };
    let mut best = f64::NEG_INFINITY;
    for u in 1..=u_cutoff {
        best = best.max(ln_term(u));
    }
    // one more cluster multiplies the term by A^{2^d} ρ^{2^d + L − 2}
    let tail_ratio = (cluster as f64 * a.ln() + (cluster + l as usize - 2) as f64 * rho.ln()).exp();
    let value = if tail_ratio < 1.0 { best.exp() } else { f64::INFINITY };
    LargeSetEstimate { value, u_cutoff, tail_ratio, growth, certified: false }
}

pub fn contraction_ledger(input: &LedgerInput) -> Result<LedgerReport> {
    input.validate()?;
    let n = n_constants(input.d, input.adjacency)?;
    Ok(ledger_with(input, &n))
}

fn ledger_with(input: &LedgerInput, n: &NConstants) -> LedgerReport {
    let d = input.d as i32;
    let l = input.l as f64;
    let two_d = 2.0 * input.d as f64;
    let pow2d = 2f64.powi(1 << d);
    let l2_bulk = 24.0 * input.q * 4.0 * pow2d * n.n2 * l.powf(-0.5 * d as f64);
    let l2_field = 4.0 * input.q * input.m as f64 * pow2d * n.n2 * l.powf(-0.5 * d as f64);
    let l3_prime = 72.0 * (d * d) as f64 * 2f64.powi(2 * d) * n.n1 * l.powi(-2);
    let l4_at = |j: usize| 4.0 * two_d.powi(3) * n.n2 * l.powi(-(j as i32 + 1));
    let l4 = l4_at(0);
    let l4_per_scale = (0..input.scales.max(1)).map(|j| (j, l4_at(j))).collect();
    let delta = 4.0 * two_d.powi(5) * 2f64.powi(d) * n.n2 / l;
    let l1 = large_set_estimate(input.d, input.l, input.a, input.adjacency);
    let total = l2_bulk + l2_field + l3_prime + l4 + delta;
    LedgerReport {
        input: input.clone(),
        n1: n.n1,
        n2: n.n2,
        l2_bulk,
        l2_field,
        l3_prime,
        l4,
        l4_per_scale,
        delta,
        l1,
        total,
        contracts: total <= 0.25,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinScale {
    pub l: u64,
    pub total: f64,
    /// Ledger total at `L − 2`.
    pub total_below: f64,
    pub target: f64,
}

/// Smallest odd `L` whose ledger total is at most `target`.
pub fn min_scale_for_contraction(input: &LedgerInput, target: f64) -> Result<MinScale> {
    if !(target > 0.0 && target <= 0.5) {
        return invalid("target must lie in (0, 1/2]");
    }
    let probe = LedgerInput { l: 3, ..input.clone() };
    probe.validate()?;
    let n = n_constants(input.d, input.adjacency)?;
    let total = |l: u64| ledger_with(&LedgerInput { l, ..input.clone() }, &n).total;
    if total(3) <= target {
        return Ok(MinScale { l: 3, total: total(3), total_below: f64::INFINITY, target });
    }
    // odd L = 2k + 1; the total is decreasing in k
    let mut lo = 1u64;
    let mut hi = 2u64;
    while total(2 * hi + 1) > target {
        lo = hi;
        hi = hi.checked_mul(2).ok_or_else(|| crate::Error::Infeasible("L overflows".into()))?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if total(2 * mid + 1) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = 2 * hi + 1;
    Ok(MinScale { l, total: total(l), total_below: total(l - 2), target })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinA {
    pub a: f64,
    /// Left side of the inequality at `a`.
    pub lhs: f64,
    pub lhs_half: f64,
}

/// `n_3(d, A/2) 2^{d(d+1)} 4r (d 2^{d+1})^η`.
pub fn correlation_lhs(n: &NConstants, a: f64, eta: f64, r: f64) -> f64 {
    let d = n.d as f64;
    n.n3(a / 2.0) * 2f64.powf(d * (d + 1.0)) * 4.0 * r * (d * 2f64.powf(d + 1.0)).powf(eta)
}

/// Smallest `A` with `correlation_lhs ≤ 1`, by doubling then bisection to
/// relative precision `1e−12`.
pub fn min_a_for_correlation(d: usize, adj: Adjacency, eta: f64, epsilon: f64, r: f64) -> Result<MinA> {
    if !(r > 0.0 && eta > 0.0 && epsilon >= 0.0 && epsilon < eta) {
        return invalid("need r > 0 and 0 <= ε < η");
    }
    let n = n_constants(d, adj)?;
    let f = |a: f64| correlation_lhs(&n, a, eta, r);
    let mut lo = 1.0;
    let mut hi = 2.0;
    while f(hi) > 1.0 {
        lo = hi;
        hi *= 2.0;
    }
    while (hi - lo) > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MinA { a: hi, lhs: f(hi), lhs_half: f(hi / 2.0) })
}

/// `2 (4h²/c + 1/A) r 2^{−N}`.
pub fn tail_bound(h: f64, a: f64, c: f64, r: f64, n: u32) -> f64 {
    2.0 * (4.0 * h * h / c + 1.0 / a) * r * 2f64.powi(-(n as i32))
}

/// Smallest `N` with `tail_bound ≤ tol`.
pub fn tail_scale(h: f64, a: f64, c: f64, r: f64, tol: f64) -> Result<u32> {
    if !(h > 0.0 && a > 0.0 && c > 0.0 && r >= 0.0 && tol > 0.0) {
        return invalid("tail inputs must be positive");
    }
    Ok((0..2000).find(|&n| tail_bound(h, a, c, r, n) <= tol).unwrap_or(2000))
}
