//! Finite-range decomposition of the lattice Coulomb kernel.
//!
//! With `u = (1/d) Σ cos p_μ = cos θ` and the Fejér kernel
//! `F_m(θ) = (sin(mθ/2) / (m sin(θ/2)))²`, a polynomial of degree `m − 1` in
//! `u`, every scale gets a factor `R_j = F_{m_j}^{k_j}` and
//!
//! ```text
//! T_j = R_1 ⋯ R_j,     Γ_j = T_{j−1} (1 − R_j) / λ,     C_j = T_j / λ.
//! ```
//!
//! `Γ_j` is a polynomial in `u` because `1 − R_j` vanishes at `λ = 0`, and it
//! is nonnegative because `0 ≤ R_j ≤ 1`. Its degree is `deg T_j − 1`, and the
//! `m_j` are chosen so that `deg T_j − 1 < L^j / 2`: the range is exact.

use crate::error::{Error, Result};
use crate::kernels::{coulomb_table, Kernel};
use crate::lattice::{norm1, Direction};
use crate::quad::{integrate_orthant, integrate_points, lambda, QuadOptions, Symbol};
use serde::Serialize;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleFactor {
    pub j: usize,
    pub m: u64,
    /// Power of the Fejér factor: 1 (Fejér) or 2 (Jackson).
    pub k: u32,
    /// Degree of `T_j` in `u`.
    pub degree: u64,
}

impl ScaleFactor {
    /// Range of `Γ_j`: it vanishes for `|x|_1` beyond this.
    pub fn range(&self) -> i64 {
        self.degree as i64 - 1
    }
}

/// Fejér factors on the first two scales, Jackson factors afterwards.
pub fn default_power(j: usize) -> u32 {
    if j <= 2 {
        1
    } else {
        2
    }
}

pub fn plan(l: u64, j_max: usize) -> Result<Vec<ScaleFactor>> {
    let mut out = Vec::with_capacity(j_max);
    let mut deg = 0u64;
    for j in 1..=j_max {
        let lj = l
            .checked_pow(j as u32)
            .ok_or_else(|| Error::ConstructionFailure { scale: j, reason: "L^j overflows".into() })?;
        let n = (lj - 1) / 2;
        let k = default_power(j);
        let budget = (n + 1).saturating_sub(deg);
        let m = budget / k as u64 + 1;
        if m < 2 {
            return Err(Error::ConstructionFailure {
                scale: j,
                reason: format!("no degree left for a nontrivial factor (budget {budget})"),
            });
        }
        deg += k as u64 * (m - 1);
        out.push(ScaleFactor { j, m, k, degree: deg });
    }
    Ok(out)
}

/// `ln(sin x / x)`, accurate near zero.
fn ln_sinc(x: f64) -> f64 {
    let x2 = x * x;
    if x.abs() < 0.5 {
        -x2 * (1.0 / 6.0
            + x2 * (1.0 / 180.0
                + x2 * (1.0 / 2835.0
                    + x2 * (1.0 / 37800.0 + x2 * (1.0 / 467775.0 + x2 * (691.0 / 3831077250.0))))))
    } else {
        (x.sin() / x).abs().ln()
    }
}

/// `ln F_m` as a function of `t = θ/2`.
fn ln_fejer(m: u64, t: f64) -> f64 {
    2.0 * (ln_sinc(m as f64 * t) - ln_sinc(t))
}

/// `t = θ/2` and `λ` from a momentum.
fn half_angle(d: usize, p: &[f64]) -> (f64, f64) {
    let lam = lambda(p);
    let s = (lam / (4.0 * d as f64)).sqrt().min(1.0);
    (s.asin(), lam)
}

fn ln_t(factors: &[ScaleFactor], t: f64) -> f64 {
    factors.iter().map(|f| f.k as f64 * ln_fejer(f.m, t)).sum()
}

/// Symbol of `Γ_j` as a function of `θ`.
pub fn gamma_symbol_theta(d: usize, factors: &[ScaleFactor], j: usize, theta: f64) -> f64 {
    let t = 0.5 * theta;
    let f = &factors[j - 1];
    let lam = 4.0 * d as f64 * t.sin().powi(2);
    gamma_symbol_raw(d, &factors[..j - 1], f, t, lam)
}

fn gamma_symbol_raw(d: usize, prev: &[ScaleFactor], f: &ScaleFactor, t: f64, lam: f64) -> f64 {
    let head = ln_t(prev, t).exp();
    if lam == 0.0 {
        return head * f.k as f64 * ((f.m * f.m - 1) as f64) / (12.0 * d as f64);
    }
    let one_minus_r = -(f.k as f64 * ln_fejer(f.m, t)).exp_m1();
    head * one_minus_r / lam
}

/// Symbol of `Γ_j` at a momentum.
pub fn gamma_symbol(d: usize, factors: &[ScaleFactor], j: usize, p: &[f64]) -> f64 {
    let (t, lam) = half_angle(d, p);
    gamma_symbol_raw(d, &factors[..j - 1], &factors[j - 1], t, lam)
}

/// Symbol of `Γ_1 + … + Γ_j = (1 − T_j)/λ` at a momentum; the `λ → 0` limit at
/// the origin.
pub fn partial_sum_symbol(d: usize, factors: &[ScaleFactor], j: usize, p: &[f64]) -> f64 {
    let (t, lam) = half_angle(d, p);
    if lam == 0.0 {
        return factors[..j].iter().map(|f| f.k as f64 * ((f.m * f.m - 1) as f64)).sum::<f64>() / (12.0 * d as f64);
    }
    -ln_t(&factors[..j], t).exp_m1() / lam
}

/// Upper bound for `T_J` at half-angles `≥ t`.
fn t_envelope(factors: &[ScaleFactor], t: f64) -> f64 {
    let s = t.sin();
    factors.iter().map(|f| (1.0 / (f.m as f64 * s).powi(2)).min(1.0).powi(f.k as i32)).product()
}

/// `T_J / λ`, the symbol of the tail `C_J`; `J = 0` is the Coulomb kernel.
struct TailSymbol<'a> {
    d: usize,
    factors: &'a [ScaleFactor],
}

impl Symbol for TailSymbol<'_> {
    fn eval(&self, p: &[f64]) -> f64 {
        let (t, lam) = half_angle(self.d, p);
        ln_t(self.factors, t).exp() / lam
    }

    fn frequency(&self) -> f64 {
        self.factors.last().map_or(0.0, |f| f.degree as f64)
    }

    fn bound(&self, u_max: f64) -> f64 {
        let s2 = (0.5 * (1.0 - u_max)).max(0.0);
        let t = s2.sqrt().min(1.0).asin();
        t_envelope(self.factors, t) / (4.0 * self.d as f64 * s2)
    }
}

struct GammaSymbol<'a> {
    d: usize,
    factors: &'a [ScaleFactor],
    j: usize,
}

impl Symbol for GammaSymbol<'_> {
    fn eval(&self, p: &[f64]) -> f64 {
        let (t, lam) = half_angle(self.d, p);
        gamma_symbol_raw(self.d, &self.factors[..self.j - 1], &self.factors[self.j - 1], t, lam)
    }

    fn frequency(&self) -> f64 {
        self.factors[self.j - 1].degree as f64
    }

    fn bound(&self, u_max: f64) -> f64 {
        let s2 = (0.5 * (1.0 - u_max)).max(0.0);
        let t = s2.sqrt().min(1.0).asin();
        t_envelope(&self.factors[..self.j - 1], t) / (4.0 * self.d as f64 * s2)
    }
}

/// Chebyshev coefficients of `Γ_j` as a polynomial in `u`.
pub fn chebyshev_coefficients(d: usize, factors: &[ScaleFactor], j: usize) -> Vec<f64> {
    let n = factors[j - 1].degree as usize;
    let vals: Vec<f64> = (0..n)
        .map(|k| gamma_symbol_theta(d, factors, j, PI * (k as f64 + 0.5) / n as f64))
        .collect();
    (0..n)
        .map(|c| {
            let s: f64 = vals
                .iter()
                .enumerate()
                .map(|(k, v)| v * (c as f64 * PI * (k as f64 + 0.5) / n as f64).cos())
                .sum();
            s * if c == 0 { 1.0 } else { 2.0 } / n as f64
        })
        .collect()
}

/// `Σ_n c_n T_n(W) δ₀` on the orthant `[0, N]^d`, where `W` averages over the
/// `2d` neighbours. The kernel is even in every coordinate, so the orthant
/// closes under reflection at 0.
fn chebyshev_orthant(d: usize, coeffs: &[f64]) -> (usize, Vec<f64>) {
    let big_n = coeffs.len() - 1;
    let m = big_n + 1;
    let size = m.pow(d as u32);
    let strides: Vec<usize> = (0..d).map(|t| m.pow((d - 1 - t) as u32)).collect();
    let coords = |i: usize, t: usize| (i / strides[t]) % m;
    let apply_w = |v: &[f64], out: &mut [f64]| {
        let inv = 1.0 / (2 * d) as f64;
        for i in 0..size {
            let mut acc = 0.0;
            for t in 0..d {
                let c = coords(i, t);
                let up = if c + 1 < m { v[i + strides[t]] } else { 0.0 };
                let down = if c > 0 { v[i - strides[t]] } else { up };
                acc += up + down;
            }
            out[i] = acc * inv;
        }
    };
    let mut acc = vec![0.0; size];
    let mut prev = vec![0.0; size];
    prev[0] = 1.0;
    acc[0] = coeffs[0];
    if big_n == 0 {
        return (m, acc);
    }
    let mut cur = vec![0.0; size];
    apply_w(&prev, &mut cur);
    for (a, c) in acc.iter_mut().zip(&cur) {
        *a += coeffs[1] * c;
    }
    let mut next = vec![0.0; size];
    for coeff in &coeffs[2..] {
        apply_w(&cur, &mut next);
        for i in 0..size {
            next[i] = 2.0 * next[i] - prev[i];
            acc[i] += coeff * next[i];
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
    }
    (m, acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrdOptions {
    pub tol: f64,
    pub table_radius: usize,
    /// Largest `(N+1)^d` for which the position-space recurrence is used.
    pub recurrence_cap: usize,
}

impl Default for FrdOptions {
    fn default() -> Self {
        FrdOptions { tol: 1e-8, table_radius: 12, recurrence_cap: 400_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Status {
    Ok,
    ResidualAboveTolerance { achieved: f64 },
}

#[derive(Debug)]
pub struct RangeDecomposition {
    pub d: usize,
    pub l: u64,
    pub j_max: usize,
    pub factors: Vec<ScaleFactor>,
    /// `Γ_1 … Γ_J`.
    pub gammas: Vec<Kernel>,
    /// `C_J`.
    pub tail: Kernel,
    pub residual: f64,
    pub status: Status,
    pub options: FrdOptions,
    on_demand: Mutex<HashMap<(usize, Vec<i64>), f64>>,
}

fn tail_orthant(d: usize, factors: &[ScaleFactor], radius: usize, tol: f64) -> Result<Vec<f64>> {
    let sym = TailSymbol { d, factors };
    Ok(integrate_orthant(d, radius, &sym, QuadOptions::with_tol(tol))?.values)
}

pub fn build_decomposition(d: usize, l: u64, j_max: usize, tol: f64) -> Result<RangeDecomposition> {
    build_decomposition_with(d, l, j_max, FrdOptions { tol, ..FrdOptions::default() })
}

pub fn build_decomposition_with(d: usize, l: u64, j_max: usize, opts: FrdOptions) -> Result<RangeDecomposition> {
    if d < 3 {
        return Err(Error::UnsupportedDimension { d, reason: "the decomposition needs d >= 3".into() });
    }
    if l < 3 || l % 2 == 0 {
        return Err(Error::Invalid(format!("L must be odd and at least 3, got {l}")));
    }
    if j_max == 0 {
        return Err(Error::Invalid("J must be at least 1".into()));
    }
    let factors = plan(l, j_max)?;
    let radius = opts.table_radius;
    check_positivity(d, &factors)?;

    // tails C_j on the table, computed lazily only where a scale needs them
    let mut tails: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut tail = |j: usize| -> Result<Vec<f64>> {
        if let Some(t) = tails.get(&j) {
            return Ok(t.clone());
        }
        let t = if j == 0 {
            let c = coulomb_table(d, radius, opts.tol)?;
            orthant_of(&c, radius)
        } else {
            tail_orthant(d, &factors[..j], radius, opts.tol)?
        };
        tails.insert(j, t.clone());
        Ok(t)
    };

    let mut gammas = Vec::with_capacity(j_max);
    for f in &factors {
        let range = f.range();
        let n = range as usize;
        let kernel = if (n + 1).pow(d as u32) <= opts.recurrence_cap {
            let coeffs = chebyshev_coefficients(d, &factors, f.j);
            let (m, orth) = chebyshev_orthant(d, &coeffs);
            let r = radius.max(n);
            let mut full = vec![0.0; (r + 1).pow(d as u32)];
            for (i, v) in full.iter_mut().enumerate() {
                let x = unflatten(i, r + 1, d);
                if x.iter().all(|&c| c < m) {
                    *v = orth[x.iter().fold(0, |a, &c| a * m + c)];
                }
            }
            Kernel::from_orthant(d, r, &full)
        } else {
            let a = tail(f.j - 1)?;
            let b = tail(f.j)?;
            let mut k = Kernel::from_orthant(d, radius, &a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
            k.error = 2.0 * opts.tol;
            k
        };
        let kernel = truncate_range(kernel, range);
        gammas.push(kernel);
    }
    let mut tail_kernel = Kernel::from_orthant(d, radius, &tail(j_max)?);
    tail_kernel.error = opts.tol;

    let c = coulomb_table(d, radius, opts.tol)?;
    let mut residual: f64 = 0.0;
    for x in c.sites() {
        let mut s = tail_kernel.get(&x)?;
        for g in &gammas {
            s += g.get(&x)?;
        }
        residual = residual.max((s - c.get(&x)?).abs());
    }
    let status = if residual <= opts.tol.max(1e-12) * 10.0 {
        Status::Ok
    } else {
        Status::ResidualAboveTolerance { achieved: residual }
    };
    Ok(RangeDecomposition {
        d,
        l,
        j_max,
        factors,
        gammas,
        tail: tail_kernel,
        residual,
        status,
        options: opts,
        on_demand: Mutex::new(HashMap::new()),
    })
}

fn unflatten(mut i: usize, m: usize, d: usize) -> Vec<usize> {
    let mut x = vec![0; d];
    for t in (0..d).rev() {
        x[t] = i % m;
        i /= m;
    }
    x
}

fn orthant_of(k: &Kernel, radius: usize) -> Vec<f64> {
    let d = k.d();
    (0..(radius + 1).pow(d as u32))
        .map(|i| {
            let x: Vec<i64> = unflatten(i, radius + 1, d).into_iter().map(|c| c as i64).collect();
            k.get(&x).unwrap()
        })
        .collect()
}

fn truncate_range(k: Kernel, range: i64) -> Kernel {
    let err = k.error;
    let mut out = Kernel::from_orthant(k.d(), k.radius(), &orthant_of_truncated(&k, range));
    out.error = err;
    out.with_range(Some(range))
}

fn orthant_of_truncated(k: &Kernel, range: i64) -> Vec<f64> {
    let d = k.d();
    let r = k.radius();
    (0..(r + 1).pow(d as u32))
        .map(|i| {
            let x: Vec<i64> = unflatten(i, r + 1, d).into_iter().map(|c| c as i64).collect();
            if norm1(&x) > range {
                0.0
            } else {
                k.get(&x).unwrap()
            }
        })
        .collect()
}

/// Sample every scale's symbol on a θ grid and on a momentum grid.
fn check_positivity(d: usize, factors: &[ScaleFactor]) -> Result<()> {
    for f in factors {
        let mut min = f64::INFINITY;
        for i in 0..=4096 {
            let theta = PI * i as f64 / 4096.0;
            min = min.min(gamma_symbol_theta(d, factors, f.j, theta));
        }
        let sym = GammaSymbol { d, factors, j: f.j };
        let g = 9usize;
        for i in 0..g.pow(d as u32) {
            let p: Vec<f64> = unflatten(i, g, d).into_iter().map(|c| PI * c as f64 / (g - 1) as f64).collect();
            if p.iter().all(|&q| q == 0.0) {
                continue;
            }
            min = min.min(sym.eval(&p));
        }
        if min < -1e-12 || min.is_nan() {
            return Err(Error::ConstructionFailure { scale: f.j, reason: format!("symbol minimum {min:e}") });
        }
    }
    Ok(())
}

impl RangeDecomposition {
    pub fn gamma(&self, j: usize) -> &Kernel {
        &self.gammas[j - 1]
    }

    /// Minimum of each scale's symbol over a θ grid and a momentum grid.
    pub fn symbol_minima(&self, grid: usize) -> Vec<f64> {
        self.factors
            .iter()
            .map(|f| {
                let sym = GammaSymbol { d: self.d, factors: &self.factors, j: f.j };
                let mut min = f64::INFINITY;
                for i in 0..grid.pow(self.d as u32) {
                    let p: Vec<f64> = unflatten(i, grid, self.d)
                        .into_iter()
                        .map(|c| PI * (c as f64 + 0.5) / grid as f64)
                        .collect();
                    min = min.min(sym.eval(&p));
                }
                for i in 0..=8192 {
                    min = min.min(gamma_symbol_theta(self.d, &self.factors, f.j, PI * i as f64 / 8192.0));
                }
                min
            })
            .collect()
    }

    /// `Γ_j(x)` for any `x`, computing outside the table on demand.
    pub fn gamma_at(&self, j: usize, x: &[i64]) -> Result<f64> {
        let g = &self.gammas[j - 1];
        if g.covers(x) {
            return g.get(x);
        }
        let mut key: Vec<i64> = x.iter().map(|c| c.abs()).collect();
        key.sort_unstable();
        if let Some(v) = self.on_demand.lock().unwrap().get(&(j, key.clone())) {
            return Ok(*v);
        }
        let sym = GammaSymbol { d: self.d, factors: &self.factors, j };
        let opts = QuadOptions::with_tol(self.options.tol);
        let v = integrate_points(self.d, std::slice::from_ref(&key), &sym, opts)?.values[0];
        self.on_demand.lock().unwrap().insert((j, key), v);
        Ok(v)
    }

    /// `∂^x_μ ∂^y_ν Γ_j(x − y)` at displacement `r`.
    pub fn gamma_grad_grad(&self, j: usize, r: &[i64], mu: Direction, nu: Direction) -> Result<f64> {
        let mut a = r.to_vec();
        a[mu.axis()] += mu.sign();
        let mut b = a.clone();
        b[nu.axis()] -= nu.sign();
        let mut c = r.to_vec();
        c[nu.axis()] -= nu.sign();
        Ok(self.gamma_at(j, &b)? - self.gamma_at(j, &a)? - self.gamma_at(j, &c)? + self.gamma_at(j, r)?)
    }

    /// `Σ_{i ≤ j} Γ_i` on the common table.
    pub fn partial_sum(&self, j: usize) -> Kernel {
        let mut k = self.gammas[0].clone();
        for g in &self.gammas[1..j] {
            k = k.add(g);
        }
        k
    }

    /// `C_k = Σ_{k < j ≤ J} Γ_j + C_J` on the table.
    pub fn tail_from(&self, k: usize) -> Kernel {
        let mut t = self.tail.clone();
        for g in self.gammas[k..].iter().rev() {
            t = t.add(g);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub alpha: Vec<i32>,
    pub constants: Vec<(usize, f64)>,
    pub spread: f64,
    pub uniform: bool,
}

/// Smallest `c_j` with `|∂^αΓ_j(x)| ≤ c_j L^{−(j−1)(d−2+|α|)}` on the table.
pub fn verify_decay(rd: &RangeDecomposition, alpha: &[i32], factor: f64) -> Result<DecayReport> {
    let power = rd.d as f64 - 2.0 + alpha.len() as f64;
    let mut constants = Vec::new();
    for (i, g) in rd.gammas.iter().enumerate() {
        let j = i + 1;
        let dg = g.derivative(alpha)?;
        let c = dg.max_abs() * (rd.l as f64).powf((j - 1) as f64 * power);
        constants.push((j, c));
    }
    let max = constants.iter().map(|c| c.1).fold(0.0, f64::max);
    let min = constants.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let spread = max / min;
    Ok(DecayReport { alpha: alpha.to_vec(), constants, spread, uniform: spread <= factor })
}

/// `(σ/4) L^{dj} Σ_{±μ} (∂_μ Γ ∂*_μ)(0, 0)`.
pub fn trace_term(gamma: &Kernel, l: u64, j: usize, sigma: f64) -> Result<f64> {
    let d = gamma.d();
    let origin = vec![0; d];
    let mut s = 0.0;
    for mu in Direction::all(d) {
        s += gamma.grad_grad(&origin, mu, mu)?;
    }
    Ok(0.25 * sigma * (l as f64).powi((d * j) as i32) * s)
}
