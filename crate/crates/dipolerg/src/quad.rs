//! Gauss–Legendre rules and cubature of lattice Fourier symbols.
//!
//! Every translation-invariant kernel here is of the form
//! `K(x) = π^{-d} ∫_{[0,π]^d} S(p) ∏ cos(x_μ p_μ) dp` with `S` even in each
//! coordinate. The integrator splits the cube dyadically toward `p = 0`,
//! subdivides cubes that are too oscillatory for the largest rule, and skips
//! cubes where a supplied bound shows the symbol is negligible.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

pub type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Nodes and weights on `[-1, 1]`, cached by order.
pub fn gauss_legendre(n: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    let rule = Arc::new(compute_gauss_legendre(n));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Nodes and weights mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let r = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (b + a);
    (r.0.iter().map(|t| c + h * t).collect(), r.1.iter().map(|w| h * w).collect())
}

/// A Fourier symbol on the Brillouin zone, even in every coordinate.
pub trait Symbol: Sync {
    fn eval(&self, p: &[f64]) -> f64;

    /// Trigonometric degree in each coordinate (0 if not a trigonometric
    /// polynomial but smooth away from the origin).
    fn frequency(&self) -> f64;

    /// Upper bound of `|S(p)|` over all `p` with `u(p) ≤ u_max`, where
    /// `u(p) = (1/d) Σ cos p_μ`.
    fn bound(&self, u_max: f64) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub tol: f64,
    pub n_base: usize,
    pub n_max: usize,
    /// Depth of the dyadic refinement toward the origin.
    pub levels: usize,
    /// Cap on symbol evaluations.
    pub budget: u64,
}

impl QuadOptions {
    pub fn with_tol(tol: f64) -> Self {
        QuadOptions { tol, n_base: 14, n_max: 96, levels: 34, budget: 4_000_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Cubature {
    pub values: Vec<f64>,
    pub error: f64,
    pub evaluations: u64,
}

enum Targets<'a> {
    /// All `x` in `[0, R]^d`, row-major.
    Orthant(usize),
    Points(&'a [Vec<i64>]),
}

/// `π^{-d} ∫_{[0,π]^d} S(p) ∏cos(x_μ p_μ) dp` for every `x ∈ [0, R]^d`.
pub fn integrate_orthant(d: usize, radius: usize, symbol: &dyn Symbol, opts: QuadOptions) -> Result<Cubature> {
    integrate(d, Targets::Orthant(radius), symbol, opts)
}

/// Same integral at an explicit list of points.
pub fn integrate_points(d: usize, points: &[Vec<i64>], symbol: &dyn Symbol, opts: QuadOptions) -> Result<Cubature> {
    integrate(d, Targets::Points(points), symbol, opts)
}

struct Cube {
    lo: Vec<f64>,
    w: f64,
    origin: bool,
    level: usize,
}

fn integrate(d: usize, targets: Targets, symbol: &dyn Symbol, opts: QuadOptions) -> Result<Cubature> {
    let (nout, reach) = match &targets {
        Targets::Orthant(r) => ((r + 1).pow(d as u32), *r as f64),
        Targets::Points(pts) => (
            pts.len(),
            pts.iter().flat_map(|x| x.iter()).map(|c| c.abs() as f64).fold(0.0, f64::max),
        ),
    };
    let mut values = vec![0.0; nout];
    let mut error = 0.0;
    let mut evaluations = 0u64;
    let skip = 1e-3 * opts.tol;
    let norm = PI.powi(-(d as i32));
    let freq = reach + symbol.frequency();

    let mut stack = vec![Cube { lo: vec![0.0; d], w: PI, origin: true, level: 0 }];
    while let Some(cube) = stack.pop() {
        let u_max = cube.lo.iter().map(|a| a.cos()).sum::<f64>() / d as f64;
        let vol = cube.w.powi(d as i32) * norm;
        if !cube.origin || cube.level >= opts.levels {
            let b = symbol.bound(u_max);
            if b.is_finite() && b < skip {
                error += b * vol;
                continue;
            }
        }
        if cube.origin && cube.level < opts.levels {
            let h = 0.5 * cube.w;
            for mask in 0..(1usize << d) {
                let lo: Vec<f64> = (0..d).map(|t| if mask >> t & 1 == 1 { h } else { 0.0 }).collect();
                stack.push(Cube { lo, w: h, origin: mask == 0, level: cube.level + 1 });
            }
            continue;
        }
        let n = opts.n_base + (0.35 * freq * cube.w).ceil() as usize;
        if n > opts.n_max {
            let h = 0.5 * cube.w;
            for mask in 0..(1usize << d) {
                let lo: Vec<f64> =
                    (0..d).map(|t| cube.lo[t] + if mask >> t & 1 == 1 { h } else { 0.0 }).collect();
                stack.push(Cube { lo, w: h, origin: false, level: cube.level + 1 });
            }
            continue;
        }
        let n2 = n + (n / 4).max(4);
        evaluations += (n.pow(d as u32) + n2.pow(d as u32)) as u64;
        if evaluations > opts.budget {
            return Err(Error::ConvergenceFailure { achieved: f64::INFINITY, requested: opts.tol });
        }
        let lo_res = cube_contribution(d, &cube, n, &targets, symbol);
        let hi_res = cube_contribution(d, &cube, n2, &targets, symbol);
        let mut diff: f64 = 0.0;
        for (v, (a, b)) in values.iter_mut().zip(lo_res.iter().zip(hi_res.iter())) {
            *v += norm * b;
            diff = diff.max((a - b).abs());
        }
        error += norm * diff;
    }
    if !(error <= opts.tol) {
        return Err(Error::ConvergenceFailure { achieved: error, requested: opts.tol });
    }
    Ok(Cubature { values, error, evaluations })
}

fn cube_contribution(d: usize, cube: &Cube, n: usize, targets: &Targets, symbol: &dyn Symbol) -> Vec<f64> {
    let rules: Vec<(Vec<f64>, Vec<f64>)> =
        (0..d).map(|t| gauss_legendre_on(n, cube.lo[t], cube.lo[t] + cube.w)).collect();
    let total = n.pow(d as u32);
    let mut f = vec![0.0; total];
    let mut p = vec![0.0; d];
    let mut idx = vec![0usize; d];
    for slot in f.iter_mut() {
        let mut w = 1.0;
        for t in 0..d {
            p[t] = rules[t].0[idx[t]];
            w *= rules[t].1[idx[t]];
        }
        *slot = w * symbol.eval(&p);
        for t in (0..d).rev() {
            idx[t] += 1;
            if idx[t] < n {
                break;
            }
            idx[t] = 0;
        }
    }
    match targets {
        Targets::Orthant(r) => {
            let m = r + 1;
            // contract one axis at a time, last axis first
            let mut a = f;
            for t in (0..d).rev() {
                let pre = n.pow(t as u32);
                let post = m.pow((d - 1 - t) as u32);
                let nodes = &rules[t].0;
                let cosm: Vec<f64> =
                    (0..n).flat_map(|i| (0..m).map(move |x| (x as f64 * nodes[i]).cos())).collect();
                let mut out = vec![0.0; pre * m * post];
                for a0 in 0..pre {
                    for i in 0..n {
                        let src = &a[(a0 * n + i) * post..(a0 * n + i + 1) * post];
                        for x in 0..m {
                            let c = cosm[i * m + x];
                            let dst = &mut out[(a0 * m + x) * post..(a0 * m + x + 1) * post];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += c * s;
                            }
                        }
                    }
                }
                a = out;
            }
            a
        }
        Targets::Points(pts) => pts
            .iter()
            .map(|x| {
                let cosm: Vec<Vec<f64>> = (0..d)
                    .map(|t| rules[t].0.iter().map(|q| (x[t] as f64 * q).cos()).collect())
                    .collect();
                let mut acc = 0.0;
                let mut idx = vec![0usize; d];
                for v in &f {
                    let mut c = *v;
                    for t in 0..d {
                        c *= cosm[t][idx[t]];
                    }
                    acc += c;
                    for t in (0..d).rev() {
                        idx[t] += 1;
                        if idx[t] < n {
                            break;
                        }
                        idx[t] = 0;
                    }
                }
                acc
            })
            .collect(),
    }
}

/// `λ(p) = 2 Σ (1 − cos p_μ) = 4 Σ sin²(p_μ/2)`.
pub fn lambda(p: &[f64]) -> f64 {
    p.iter().map(|q| (0.5 * q).sin().powi(2)).sum::<f64>() * 4.0
}

/// The symbol `1/λ` of the lattice Coulomb kernel.
pub struct InverseLaplacian {
    pub d: usize,
}

impl Symbol for InverseLaplacian {
    fn eval(&self, p: &[f64]) -> f64 {
        1.0 / lambda(p)
    }

    fn frequency(&self) -> f64 {
        0.0
    }

    fn bound(&self, u_max: f64) -> f64 {
        1.0 / (2.0 * self.d as f64 * (1.0 - u_max))
    }
}
