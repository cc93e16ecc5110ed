//! The dipole gas: energies, spherical averages, the grand-canonical series,
//! Gaussian sampling on the torus and Monte Carlo cumulants.

use crate::error::{invalid, Error, Result};
use crate::frd::{partial_sum_symbol, plan};
use crate::kernels::Kernel;
use crate::lattice::{Direction, Field, Geometry, Site};
use crate::quad::{gauss_legendre, lambda};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// A set of dipoles `(x_i, p_i)` with unit moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleConfig {
    d: usize,
    dipoles: Vec<(Site, Vec<f64>)>,
}

impl DipoleConfig {
    pub fn new(d: usize, dipoles: Vec<(Site, Vec<f64>)>) -> Result<Self> {
        for (x, p) in &dipoles {
            if x.len() != d || p.len() != d {
                return invalid(format!("dipole at {x:?} has the wrong dimension"));
            }
            let n: f64 = p.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return invalid(format!("moment {p:?} has norm {n}"));
            }
        }
        Ok(DipoleConfig { d, dipoles })
    }

    pub fn empty(d: usize) -> Self {
        DipoleConfig { d, dipoles: Vec::new() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dipoles(&self) -> &[(Site, Vec<f64>)] {
        &self.dipoles
    }

    pub fn len(&self) -> usize {
        self.dipoles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dipoles.is_empty()
    }
}

/// `∂^x_μ ∂^y_ν C(x − y)` for the forward directions, as a `d × d` matrix.
fn gradient_matrix(c: &Kernel, r: &[i64]) -> Result<Vec<f64>> {
    let d = c.d();
    let mut g = vec![0.0; d * d];
    for mu in Direction::positive(d) {
        for nu in Direction::positive(d) {
            g[mu.axis() * d + nu.axis()] = c.grad_grad(r, mu, nu)?;
        }
    }
    Ok(g)
}

fn quad_form(g: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut s = 0.0;
    for m in 0..d {
        for n in 0..d {
            s += a[m] * g[m * d + n] * b[n];
        }
    }
    s
}

/// `Σ_{k,j} (p_k·∂)(p_j·∂) C(x_k, x_j)`, self terms included.
pub fn pair_energy(config: &DipoleConfig, c: &Kernel) -> Result<f64> {
    if c.d() != config.d {
        return invalid("kernel and configuration dimensions differ");
    }
    let mut e = 0.0;
    for (xk, pk) in &config.dipoles {
        for (xj, pj) in &config.dipoles {
            let r: Site = xk.iter().zip(xj).map(|(a, b)| a - b).collect();
            e += quad_form(&gradient_matrix(c, &r)?, pk, pj);
        }
    }
    Ok(e)
}

/// `∫ cos(p·v) dp` over the unit sphere in ℝ^d with the normalized measure.
pub fn sphere_cos_moment(d: usize, v: &[f64]) -> f64 {
    let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    radial_cos_moment(d, r)
}

fn radial_cos_moment(d: usize, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    match d {
        1 => r.cos(),
        3 => r.sin() / r,
        _ => {
            // the integrand only sees the polar angle to v
            let n = 24 + (2.0 * r).ceil() as usize;
            let rule = gauss_legendre(n);
            let (mut num, mut den) = (0.0, 0.0);
            for (x, w) in rule.0.iter().zip(&rule.1) {
                let th = 0.5 * PI * (x + 1.0);
                let s = th.sin().powi(d as i32 - 2);
                num += w * s * (r * th.cos()).cos();
                den += w * s;
            }
            num / den
        }
    }
}

/// `Σ_{x∈region} ∫ cos(u p·∂φ(x)) dp` with the forward gradient.
pub fn w_energy<'a>(phi: &Field, region: impl IntoIterator<Item = &'a Site>, u: f64) -> Result<f64> {
    let d = phi.d();
    let mut acc = 0.0;
    let mut g = vec![0.0; d];
    for x in region {
        for mu in Direction::positive(d) {
            g[mu.axis()] = u * crate::lattice::derivative(phi, mu.value(), x)?;
        }
        acc += sphere_cos_moment(d, &g);
    }
    Ok(acc)
}

/// A product rule on `S^{d−1}` for `d ≤ 3`, normalized to total weight 1 and
/// symmetric under `p → −p`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub d: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn new(d: usize, order: usize) -> Result<Self> {
        let order = order.max(1);
        let (mut points, mut weights) = (Vec::new(), Vec::new());
        match d {
            1 => {
                points = vec![vec![1.0], vec![-1.0]];
                weights = vec![0.5, 0.5];
            }
            2 => {
                let n = 2 * order;
                for i in 0..n {
                    let a = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                    points.push(vec![a.cos(), a.sin()]);
                    weights.push(1.0 / n as f64);
                }
            }
            3 => {
                let rule = gauss_legendre(order);
                let n = 2 * order;
                for (c, w) in rule.0.iter().zip(&rule.1) {
                    let s = (1.0 - c * c).sqrt();
                    for i in 0..n {
                        let a = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                        points.push(vec![s * a.cos(), s * a.sin(), *c]);
                        weights.push(0.5 * w / n as f64);
                    }
                }
            }
            _ => {
                return Err(Error::UnsupportedDimension { d, reason: "sphere rules exist for d <= 3".into() });
            }
        }
        Ok(SphereRule { d, points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A periodic box `(ℤ/side)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    pub d: usize,
    pub side: usize,
}

impl Torus {
    pub fn new(d: usize, side: usize) -> Result<Self> {
        if d == 0 || side < 2 {
            return invalid(format!("torus needs d >= 1 and side >= 2, got d={d}, side={side}"));
        }
        Ok(Torus { d, side })
    }

    pub fn volume(&self) -> usize {
        self.side.pow(self.d as u32)
    }

    pub fn site(&self, mut idx: usize) -> Site {
        let mut x = vec![0; self.d];
        for k in (0..self.d).rev() {
            x[k] = (idx % self.side) as i64;
            idx /= self.side;
        }
        x
    }

    pub fn index(&self, x: &[i64]) -> usize {
        x.iter().fold(0, |acc, &c| acc * self.side + c.rem_euclid(self.side as i64) as usize)
    }

    pub fn momentum(&self, idx: usize) -> Vec<f64> {
        self.site(idx).iter().map(|&k| 2.0 * PI * k as f64 / self.side as f64).collect()
    }
}

/// Which torus covariance to use; every variant drops the zero mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovarianceSpec {
    /// `(−Δ)^{-1}` scaled by `1/(1+σ)`.
    InverseLaplacian { sigma: f64 },
    /// `Γ_1 + … + Γ_j` of the decomposition with block factor `l`.
    RangePartialSum { l: u64, j: usize },
    /// An explicit symbol indexed like the torus sites.
    Symbol(Vec<f64>),
}

pub fn torus_symbol(torus: Torus, cov: &CovarianceSpec) -> Result<Vec<f64>> {
    let n = torus.volume();
    let mut s = match cov {
        CovarianceSpec::InverseLaplacian { sigma } => {
            if *sigma <= -1.0 {
                return Err(Error::Domain(vec![]));
            }
            (0..n)
                .map(|i| {
                    let lam = lambda(&torus.momentum(i));
                    if i == 0 {
                        0.0
                    } else {
                        1.0 / ((1.0 + sigma) * lam)
                    }
                })
                .collect::<Vec<_>>()
        }
        CovarianceSpec::RangePartialSum { l, j } => {
            let factors = plan(*l, *j)?;
            (0..n).map(|i| partial_sum_symbol(torus.d, &factors, *j, &torus.momentum(i))).collect()
        }
        CovarianceSpec::Symbol(v) => {
            if v.len() != n {
                return invalid(format!("symbol has {} entries, expected {n}", v.len()));
            }
            v.clone()
        }
    };
    s[0] = 0.0;
    Ok(s)
}

/// In-place d-dimensional FFT on a torus array, one axis at a time.
struct TorusFft {
    torus: Torus,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl TorusFft {
    fn new(torus: Torus) -> Self {
        let mut planner = FftPlanner::new();
        TorusFft {
            torus,
            forward: planner.plan_fft_forward(torus.side),
            inverse: planner.plan_fft_inverse(torus.side),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (d, side) = (self.torus.d, self.torus.side);
        let fft = if inverse { &self.inverse } else { &self.forward };
        let n = data.len();
        let mut lines = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..d {
            let stride = side.pow((d - 1 - axis) as u32);
            let mut li = 0;
            for base in 0..n {
                if (base / stride) % side != 0 {
                    continue;
                }
                for c in 0..side {
                    lines[li * side + c] = data[base + c * stride];
                }
                li += 1;
            }
            fft.process(&mut lines);
            li = 0;
            for base in 0..n {
                if (base / stride) % side != 0 {
                    continue;
                }
                for c in 0..side {
                    data[base + c * stride] = lines[li * side + c];
                }
                li += 1;
            }
        }
    }
}

/// The torus covariance in position space, `(1/N) Σ_k S(k) e^{ik·x}`.
pub fn torus_covariance(torus: Torus, cov: &CovarianceSpec) -> Result<Vec<f64>> {
    let s = torus_symbol(torus, cov)?;
    let n = s.len() as f64;
    let mut data: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    TorusFft::new(torus).run(&mut data, true);
    Ok(data.iter().map(|c| c.re / n).collect())
}

/// A periodic table as a kernel on `[-side, side]^d`, enough for every
/// displacement and its stencils.
pub fn periodic_kernel(torus: Torus, table: &[f64]) -> Kernel {
    Kernel::from_fn(torus.d, torus.side, |x| table[torus.index(x)])
}

/// Gradient covariance `∂^x_μ ∂^y_ν C_T(r)` for forward directions by a direct
/// mode sum.
pub fn gradient_covariance(torus: Torus, symbol: &[f64], r: &[i64], mu: usize, nu: usize) -> f64 {
    let n = torus.volume();
    let mut acc = 0.0;
    for (i, &s) in symbol.iter().enumerate().skip(1) {
        if s == 0.0 {
            continue;
        }
        let k = torus.momentum(i);
        let a = Complex64::new(k[mu].cos() - 1.0, k[mu].sin());
        let b = Complex64::new(k[nu].cos() - 1.0, -k[nu].sin());
        let ph: f64 = k.iter().zip(r).map(|(q, &x)| q * x as f64).sum();
        acc += (a * b * Complex64::from_polar(1.0, ph)).re * s;
    }
    acc / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrandPartition {
    pub value: f64,
    /// Coefficient of `z^n` for `n = 0..=n_max`.
    pub coefficients: Vec<f64>,
    /// `|z^{n_max} c_{n_max}|`, the size of the last retained term.
    pub last_term: f64,
}

pub const DEFAULT_GRAND_BUDGET: f64 = 2e9;

/// `c_n = (1/n!) Σ_{x's} ∫ dp's exp(−½ Σ (p_k·∂)(p_j·∂) C)` with the first
/// dipole pinned at the origin by translation invariance.
fn grand_coefficient(torus: Torus, c: &Kernel, n: usize, rule: &SphereRule, budget: f64) -> Result<f64> {
    if n == 0 {
        return Ok(1.0);
    }
    let vol = torus.volume();
    let q = rule.len();
    let cost = (vol as f64).powi(n as i32 - 1) * (q as f64).powi(n as i32) * n as f64;
    if cost > budget {
        return Err(Error::BudgetExceeded { partial: 0 });
    }
    let mats: Vec<Vec<f64>> = (0..vol).map(|i| gradient_matrix(c, &torus.site(i))).collect::<Result<_>>()?;
    let selfe: Vec<f64> = rule.points.iter().map(|p| quad_form(&mats[0], p, p)).collect();
    // positions[k] and sphere indices[k] for the dipoles placed so far
    let mut pos = vec![0usize; n];
    let mut idx = vec![0usize; n];
    fn place(
        k: usize,
        energy: f64,
        weight: f64,
        pos: &mut [usize],
        idx: &mut [usize],
        ctx: &(Torus, &[Vec<f64>], &SphereRule, &[f64]),
    ) -> f64 {
        let (torus, mats, rule, selfe) = *ctx;
        let n = pos.len();
        if k == n {
            return weight * (-0.5 * energy).exp();
        }
        let mut acc = 0.0;
        let sites: Vec<usize> = if k == 0 { vec![0] } else { (0..torus.volume()).collect() };
        for &x in &sites {
            pos[k] = x;
            let xs = torus.site(x);
            for a in 0..rule.len() {
                idx[k] = a;
                let mut e = energy + selfe[a];
                for i in 0..k {
                    let xi = torus.site(pos[i]);
                    let r: Vec<i64> = xs.iter().zip(&xi).map(|(u, v)| u - v).collect();
                    e += 2.0 * quad_form(&mats[torus.index(&r)], &rule.points[a], &rule.points[idx[i]]);
                }
                acc += place(k + 1, e, weight * rule.weights[a], pos, idx, ctx);
            }
        }
        acc
    }
    let ctx = (torus, &mats[..], rule, &selfe[..]);
    let s = place(0, 0.0, 1.0, &mut pos, &mut idx, &ctx);
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    Ok(vol as f64 * s / fact)
}

/// The grand-canonical series truncated at `n_max ≤ 4`.
pub fn grand_partition_truncated(torus: Torus, z: f64, n_max: usize, c: &Kernel, rule_order: usize) -> Result<GrandPartition> {
    if n_max > 4 {
        return invalid("n_max must be at most 4");
    }
    if c.d() != torus.d {
        return invalid("kernel and torus dimensions differ");
    }
    let rule = SphereRule::new(torus.d, rule_order)?;
    let mut coefficients = Vec::with_capacity(n_max + 1);
    let mut value = 0.0;
    for n in 0..=n_max {
        let cn = grand_coefficient(torus, c, n, &rule, DEFAULT_GRAND_BUDGET)?;
        value += cn * z.powi(n as i32);
        coefficients.push(cn);
    }
    let last_term = (coefficients[n_max] * z.powi(n_max as i32)).abs();
    Ok(GrandPartition { value, coefficients, last_term })
}

/// `(1/n!) E[W^n]` from Wick's theorem on cosines, using gradient covariances
/// from a mode sum and expanding each cosine into `e^{±i·}`.
fn gaussian_coefficient(torus: Torus, symbol: &[f64], n: usize, rule: &SphereRule) -> Result<f64> {
    let d = torus.d;
    let vol = torus.volume();
    match n {
        0 => Ok(1.0),
        1 => {
            let g0 = gradient_matrix_modes(torus, symbol, &vec![0; d]);
            let s: f64 = rule.points.iter().zip(&rule.weights).map(|(p, w)| w * (-0.5 * quad_form(&g0, p, p)).exp()).sum();
            Ok(vol as f64 * s)
        }
        2 => {
            let g0 = gradient_matrix_modes(torus, symbol, &vec![0; d]);
            let selfe: Vec<f64> = rule.points.iter().map(|p| quad_form(&g0, p, p)).collect();
            let q = rule.len();
            let mut total = 0.0;
            let mut gp = vec![0.0; q * d];
            for ri in 0..vol {
                let g = gradient_matrix_modes(torus, symbol, &torus.site(ri));
                for b in 0..q {
                    for m in 0..d {
                        gp[b * d + m] = (0..d).map(|nn| g[m * d + nn] * rule.points[b][nn]).sum();
                    }
                }
                let mut acc = 0.0;
                for a in 0..q {
                    let pa = &rule.points[a];
                    let mut inner = 0.0;
                    for b in 0..q {
                        let cross: f64 = (0..d).map(|m| pa[m] * gp[b * d + m]).sum();
                        let base = -0.5 * (selfe[a] + selfe[b]);
                        // signs (+,+), (−,−) give +cross; (+,−), (−,+) give −cross
                        let e = 0.5 * ((base - cross).exp() + (base + cross).exp());
                        inner += rule.weights[b] * e;
                    }
                    acc += rule.weights[a] * inner;
                }
                total += acc;
            }
            Ok(vol as f64 * total / 2.0)
        }
        _ => invalid("the Gaussian side is implemented for n <= 2"),
    }
}

fn gradient_matrix_modes(torus: Torus, symbol: &[f64], r: &[i64]) -> Vec<f64> {
    let d = torus.d;
    let mut g = vec![0.0; d * d];
    for m in 0..d {
        for n in 0..d {
            g[m * d + n] = gradient_covariance(torus, symbol, r, m, n);
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KacSiegertReport {
    pub order: usize,
    /// Gaussian-integral coefficient.
    pub lhs: f64,
    /// Grand-canonical coefficient.
    pub rhs: f64,
    pub diff: f64,
    pub relative: f64,
    pub tol: f64,
    pub ok: bool,
}

/// Compares the `z^n` coefficients of `∫ e^{zW} dμ_C` and of the grand
/// canonical sum on a torus with `C = (−Δ)^{-1}`.
pub fn kac_siegert_check(torus: Torus, n: usize, tol: f64) -> Result<KacSiegertReport> {
    if n > 2 {
        return invalid("the check supports orders n <= 2");
    }
    if torus.d > 3 {
        return Err(Error::UnsupportedDimension { d: torus.d, reason: "sphere rules exist for d <= 3".into() });
    }
    let cov = CovarianceSpec::InverseLaplacian { sigma: 0.0 };
    let symbol = torus_symbol(torus, &cov)?;
    let table = torus_covariance(torus, &cov)?;
    let c = periodic_kernel(torus, &table);
    let rhs = grand_coefficient(torus, &c, n, &SphereRule::new(torus.d, 10)?, DEFAULT_GRAND_BUDGET)?;
    let lhs = gaussian_coefficient(torus, &symbol, n, &SphereRule::new(torus.d, 13)?)?;
    let diff = (lhs - rhs).abs();
    let relative = diff / lhs.abs().max(f64::MIN_POSITIVE);
    Ok(KacSiegertReport { order: n, lhs, rhs, diff, relative, tol, ok: relative <= tol })
}

/// Independent standard normals per site pushed through `√S` in momentum
/// space; the zero mode is dropped.
pub struct SpectralSampler {
    torus: Torus,
    sqrt_symbol: Vec<f64>,
    fft: TorusFft,
    rng: ChaCha8Rng,
    buf: Vec<Complex64>,
}

impl SpectralSampler {
    pub fn new(torus: Torus, symbol: &[f64], seed: u64, stream: u64) -> Result<Self> {
        if symbol.len() != torus.volume() {
            return invalid("symbol length does not match the torus");
        }
        let scale = symbol.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some((i, v)) = symbol.iter().enumerate().find(|(_, v)| v.is_nan() || **v < -1e-12 * scale.max(1.0)) {
            return Err(Error::InvalidCovariance(format!("symbol {v:e} at mode {i}")));
        }
        let mut sqrt_symbol: Vec<f64> = symbol.iter().map(|v| v.max(0.0).sqrt()).collect();
        sqrt_symbol[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(SpectralSampler {
            torus,
            sqrt_symbol,
            fft: TorusFft::new(torus),
            rng,
            buf: vec![Complex64::new(0.0, 0.0); torus.volume()],
        })
    }

    pub fn from_spec(torus: Torus, cov: &CovarianceSpec, seed: u64, stream: u64) -> Result<Self> {
        SpectralSampler::new(torus, &torus_symbol(torus, cov)?, seed, stream)
    }

    pub fn sample(&mut self) -> Field {
        let n = self.buf.len();
        for c in self.buf.iter_mut() {
            *c = Complex64::new(StandardNormal.sample(&mut self.rng), 0.0);
        }
        self.fft.run(&mut self.buf, false);
        for (c, s) in self.buf.iter_mut().zip(&self.sqrt_symbol) {
            *c *= *s;
        }
        self.fft.run(&mut self.buf, true);
        let values = self.buf.iter().map(|c| c.re / n as f64).collect();
        Field::from_values(self.torus.d, self.torus.side, Geometry::Torus, values).expect("torus sized buffer")
    }
}

impl Iterator for SpectralSampler {
    type Item = Field;

    fn next(&mut self) -> Option<Field> {
        Some(self.sample())
    }
}

/// `count` samples of the Gaussian field on the torus.
pub fn gaussian_sampler(torus: Torus, cov: &CovarianceSpec, seed: u64, count: usize) -> Result<impl Iterator<Item = Field>> {
    Ok(SpectralSampler::from_spec(torus, cov, seed, 0)?.take(count))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldVariant {
    None,
    GradientLinear,
    GradientExponential,
    General,
}

/// A bounded local functional of the field used by the general variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFunctional {
    pub kind: FunctionalKind,
    pub x: Site,
    /// Declared growth constants `M_k`, `m_k` in `|f_k| ≤ M_k‖φ‖ + m_k`.
    pub growth: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalKind {
    /// `∫ cos(p·∂φ(x)) dp`, the dipole density at `x`.
    DipoleDensity,
}

impl FunctionalKind {
    /// Smallest `(M, m)` this functional satisfies.
    pub fn growth(self) -> (f64, f64) {
        match self {
            FunctionalKind::DipoleDensity => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalFieldSpec {
    pub variant: FieldVariant,
    pub points: Vec<Site>,
    pub directions: Vec<i32>,
    pub weights: Vec<Complex64>,
    /// Analyticity radius `a` bounding the `|t_k|`.
    pub radius: f64,
    #[serde(default)]
    pub functionals: Vec<LocalFunctional>,
}

impl ExternalFieldSpec {
    pub fn none() -> Self {
        ExternalFieldSpec {
            variant: FieldVariant::None,
            points: Vec::new(),
            directions: Vec::new(),
            weights: Vec::new(),
            radius: 0.5,
            functionals: Vec::new(),
        }
    }

    /// Unit-weight gradient sources `Σ t_k ∂_{μ_k}φ(x_k)`.
    pub fn gradient(points: Vec<Site>, directions: Vec<i32>) -> Self {
        let m = points.len();
        ExternalFieldSpec {
            variant: FieldVariant::GradientLinear,
            points,
            directions,
            weights: vec![Complex64::new(0.1, 0.0); m],
            radius: 0.5,
            functionals: Vec::new(),
        }
    }

    pub fn exponential(points: Vec<Site>, directions: Vec<i32>) -> Self {
        ExternalFieldSpec { variant: FieldVariant::GradientExponential, ..Self::gradient(points, directions) }
    }

    pub fn dipole_density(points: Vec<Site>) -> Self {
        let m = points.len();
        let functionals = points
            .iter()
            .map(|x| LocalFunctional { kind: FunctionalKind::DipoleDensity, x: x.clone(), growth: (0.0, 1.0) })
            .collect();
        ExternalFieldSpec {
            variant: FieldVariant::General,
            points,
            directions: Vec::new(),
            weights: vec![Complex64::new(0.1, 0.0); m],
            radius: 0.5,
            functionals,
        }
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.variant == FieldVariant::None {
            return Ok(());
        }
        let m = self.points.len();
        if self.weights.len() != m {
            return invalid("one weight per point is required");
        }
        for (i, x) in self.points.iter().enumerate() {
            if x.len() != d {
                return invalid(format!("point {x:?} is not in dimension {d}"));
            }
            if self.points[..i].contains(x) {
                return invalid(format!("point {x:?} is repeated"));
            }
        }
        if !(self.radius > 0.0) {
            return invalid("analyticity radius must be positive");
        }
        if let Some(t) = self.weights.iter().find(|t| t.norm() > self.radius) {
            return invalid(format!("weight {t} exceeds the radius {}", self.radius));
        }
        match self.variant {
            FieldVariant::GradientLinear | FieldVariant::GradientExponential => {
                if self.directions.len() != m {
                    return invalid("one direction per point is required");
                }
                for &mu in &self.directions {
                    Direction::new(mu, d)?;
                }
            }
            FieldVariant::General => {
                if self.functionals.len() != m {
                    return invalid("one functional per point is required");
                }
                for (f, x) in self.functionals.iter().zip(&self.points) {
                    if &f.x != x {
                        return invalid("functional sites must match the points");
                    }
                    let (big, small) = f.kind.growth();
                    if f.growth.0 < big || f.growth.1 < small {
                        return invalid(format!("declared growth {:?} is below ({big}, {small})", f.growth));
                    }
                }
            }
            FieldVariant::None => {}
        }
        Ok(())
    }

    /// Points with their directions and functionals sorted canonically.
    fn canonical(&self) -> ExternalFieldSpec {
        let m = self.points.len();
        let mut order: Vec<usize> = (0..m).collect();
        let key = |i: usize| (self.points[i].clone(), self.directions.get(i).copied().unwrap_or(0));
        order.sort_by_key(|&i| key(i));
        ExternalFieldSpec {
            variant: self.variant,
            points: order.iter().map(|&i| self.points[i].clone()).collect(),
            directions: if self.directions.is_empty() { Vec::new() } else { order.iter().map(|&i| self.directions[i]).collect() },
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            radius: self.radius,
            functionals: if self.functionals.is_empty() { Vec::new() } else { order.iter().map(|&i| self.functionals[i].clone()).collect() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    /// Imaginary part of the estimate; zero for real observables.
    pub imag: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
    pub ess: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub samples: usize,
    /// Independent chains; also the batches for the standard error.
    pub chains: usize,
    pub seed: u64,
    /// Fail when the Kish effective sample size falls below this fraction.
    pub min_ess_fraction: f64,
    pub threads: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { samples: 4000, chains: 20, seed: 1, min_ess_fraction: 0.1, threads: 1 }
    }
}

impl McOptions {
    fn validate(&self) -> Result<()> {
        if self.chains < 2 || self.samples < self.chains {
            return invalid("need at least two chains and one sample per chain");
        }
        Ok(())
    }

    fn per_chain(&self) -> usize {
        self.samples / self.chains
    }
}

/// Runs `f` on every chain with its own RNG stream and collects the results
/// in chain order.
fn run_chains<T: Send>(
    torus: Torus,
    cov: &CovarianceSpec,
    opts: &McOptions,
    f: impl Fn(&mut SpectralSampler, usize) -> T + Sync,
) -> Result<Vec<T>> {
    let symbol = torus_symbol(torus, cov)?;
    let per = opts.per_chain();
    let threads = opts.threads.max(1).min(opts.chains);
    let mut out: Vec<Option<T>> = (0..opts.chains).map(|_| None).collect();
    let work = |c: usize| -> Result<T> {
        let mut s = SpectralSampler::new(torus, &symbol, opts.seed, c as u64)?;
        Ok(f(&mut s, per))
    };
    if threads == 1 {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = Some(work(c)?);
        }
    } else {
        let results: Vec<Vec<(usize, Result<T>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let work = &work;
                    scope.spawn(move || (t..opts.chains).step_by(threads).map(|c| (c, work(c))).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("chain worker panicked")).collect()
        });
        for (c, r) in results.into_iter().flatten() {
            out[c] = Some(r?);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every chain ran")).collect())
}

/// Per-site observables needed by a field spec, evaluated on every
/// translate of the point set.
struct Observables {
    torus: Torus,
    spec: ExternalFieldSpec,
    /// `(site index, axis, sign)` per point and translation for gradients.
    grad_index: Vec<Vec<(usize, usize, f64)>>,
}

impl Observables {
    fn new(torus: Torus, spec: &ExternalFieldSpec) -> Self {
        let spec = spec.canonical();
        let n = torus.volume();
        let mut grad_index = Vec::new();
        for (k, x) in spec.points.iter().enumerate() {
            let mu = spec.directions.get(k).copied().unwrap_or(1);
            let dir = Direction::new(mu, torus.d).unwrap_or_else(|_| Direction::new(1, torus.d).unwrap());
            let mut row = Vec::with_capacity(n);
            for t in 0..n {
                let mut y: Site = x.iter().zip(torus.site(t)).map(|(a, b)| a + b).collect();
                // ∂_{−μ}φ(y) = −∂_μφ(y − e_μ)
                let sign = if dir.sign() < 0 {
                    y[dir.axis()] -= 1;
                    -1.0
                } else {
                    1.0
                };
                row.push((torus.index(&y), dir.axis(), sign));
            }
            grad_index.push(row);
        }
        Observables { torus, spec, grad_index }
    }

    fn m(&self) -> usize {
        self.spec.points.len()
    }

    /// Observable `k` at translation `t`, given forward gradients and the
    /// per-site dipole density.
    fn value(&self, k: usize, t: usize, grads: &[f64], density: &[f64]) -> Complex64 {
        let d = self.torus.d;
        let (i, axis, sign) = self.grad_index[k][t];
        match self.spec.variant {
            FieldVariant::GradientLinear | FieldVariant::None => Complex64::new(sign * grads[i * d + axis], 0.0),
            FieldVariant::GradientExponential => Complex64::from_polar(1.0, sign * grads[i * d + axis]),
            FieldVariant::General => {
                let i = self.torus.index(&self.spec.points[k]);
                let y = self.torus.index(
                    &self.torus.site(i).iter().zip(self.torus.site(t)).map(|(a, b)| a + b).collect::<Vec<_>>(),
                );
                Complex64::new(density[y], 0.0)
            }
        }
    }

    /// Translation-averaged moments `E[∏_{k∈S} O_k]` for every subset `S`
    /// (bit mask).
    fn subset_moments(&self, grads: &[f64], density: &[f64]) -> Vec<Complex64> {
        let m = self.m();
        let n = self.torus.volume();
        let mut acc = vec![Complex64::new(0.0, 0.0); 1 << m];
        let mut prod = vec![Complex64::new(0.0, 0.0); 1 << m];
        let mut vals = vec![Complex64::new(0.0, 0.0); m];
        for t in 0..n {
            for (k, v) in vals.iter_mut().enumerate() {
                *v = self.value(k, t, grads, density);
            }
            prod[0] = Complex64::new(1.0, 0.0);
            for s in 1..(1usize << m) {
                let low = s.trailing_zeros() as usize;
                prod[s] = prod[s & (s - 1)] * vals[low];
            }
            for (a, p) in acc.iter_mut().zip(&prod) {
                *a += p;
            }
        }
        acc.iter().map(|a| a / n as f64).collect()
    }
}

fn site_density(torus: Torus, grads: &[f64]) -> Vec<f64> {
    let d = torus.d;
    (0..torus.volume()).map(|i| sphere_cos_moment(d, &grads[i * d..(i + 1) * d])).collect()
}

/// All set partitions of `{0..m}` as lists of bit masks.
fn set_partitions(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; m];
    fn rec(i: usize, max: usize, labels: &mut [usize], out: &mut Vec<Vec<usize>>) {
        let m = labels.len();
        if i == m {
            let blocks = labels.iter().max().map_or(0, |&b| b + 1);
            let mut masks = vec![0usize; blocks];
            for (k, &b) in labels.iter().enumerate() {
                masks[b] |= 1 << k;
            }
            out.push(masks);
            return;
        }
        for b in 0..=max {
            labels[i] = b;
            rec(i + 1, if b == max { max + 1 } else { max }, labels, out);
        }
    }
    if m > 0 {
        rec(0, 0, &mut labels, &mut out);
    }
    out
}

/// Joint cumulant from the moments of every subset.
pub fn cumulant_from_moments(m: usize, moments: &[Complex64]) -> Complex64 {
    let mut k = Complex64::new(0.0, 0.0);
    for part in set_partitions(m) {
        let b = part.len();
        let coef = (1..b).map(|i| i as f64).product::<f64>() * if b % 2 == 0 { -1.0 } else { 1.0 };
        let prod = part.iter().fold(Complex64::new(1.0, 0.0), |p, &mask| p * moments[mask]);
        k += prod * coef;
    }
    k
}

struct WeightedMoments {
    log_weights: Vec<f64>,
    moments: Vec<Vec<Complex64>>,
}

fn weighted_mean(logw: &[f64], moments: &[Vec<Complex64>], shift: f64) -> Vec<Complex64> {
    let len = moments.first().map_or(0, |v| v.len());
    let mut acc = vec![Complex64::new(0.0, 0.0); len];
    let mut wsum = 0.0;
    for (lw, mv) in logw.iter().zip(moments) {
        let w = (lw - shift).exp();
        wsum += w;
        for (a, v) in acc.iter_mut().zip(mv) {
            *a += v * w;
        }
    }
    acc.iter().map(|a| a / wsum).collect()
}

fn kish_ess(logw: &[f64]) -> f64 {
    let shift = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for lw in logw {
        let w = (lw - shift).exp();
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / s2
}

/// Full-sample estimate plus the batch-means standard error of any statistic
/// of the weighted moments.
fn batch_estimate(
    chains: &[WeightedMoments],
    opts: &McOptions,
    stat: impl Fn(&[Complex64]) -> Complex64,
) -> Result<MCEstimate> {
    let all_w: Vec<f64> = chains.iter().flat_map(|c| c.log_weights.iter().copied()).collect();
    let shift = all_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let all_m: Vec<Vec<Complex64>> = chains.iter().flat_map(|c| c.moments.iter().cloned()).collect();
    let ess = kish_ess(&all_w);
    let samples = all_w.len();
    if ess < opts.min_ess_fraction * samples as f64 {
        return Err(Error::UnreliableEstimate(format!("effective sample size {ess:.1} of {samples}")));
    }
    let full = stat(&weighted_mean(&all_w, &all_m, shift));
    let batch: Vec<f64> = chains.iter().map(|c| stat(&weighted_mean(&c.log_weights, &c.moments, shift)).re).collect();
    let b = batch.len() as f64;
    let mean_b = batch.iter().sum::<f64>() / b;
    let var = batch.iter().map(|v| (v - mean_b).powi(2)).sum::<f64>() / (b - 1.0);
    Ok(MCEstimate { mean: full.re, imag: full.im, stderr: (var / b).sqrt(), samples, seed: opts.seed, ess })
}

fn sample_moments(torus: Torus, z: f64, obs: &Observables, sampler: &mut SpectralSampler, count: usize) -> WeightedMoments {
    let need_density = z != 0.0 || obs.spec.variant == FieldVariant::General;
    let mut log_weights = Vec::with_capacity(count);
    let mut moments = Vec::with_capacity(count);
    for _ in 0..count {
        let phi = sampler.sample();
        let grads = crate::lattice::torus_gradients(&phi);
        let density = if need_density { site_density(torus, &grads) } else { Vec::new() };
        log_weights.push(if z != 0.0 { z * density.iter().sum::<f64>() } else { 0.0 });
        moments.push(obs.subset_moments(&grads, &density));
    }
    WeightedMoments { log_weights, moments }
}

fn check_mc_inputs(torus: Torus, sigma: f64, field: &ExternalFieldSpec, opts: &McOptions) -> Result<()> {
    opts.validate()?;
    field.validate(torus.d)?;
    if field.variant == FieldVariant::None || field.m() < 2 {
        return invalid("truncated correlations need a field spec with at least two points");
    }
    if field.m() > 8 {
        return invalid("at most 8 points are supported");
    }
    if sigma <= -1.0 {
        return Err(Error::Domain(vec![]));
    }
    Ok(())
}

/// Truncated correlation `⟨∏ O_k⟩ᵗ` under `e^{zW − σV} dμ_C / Z` on the torus,
/// as the joint cumulant of the observables.
///
/// The `e^{−σV}` factor is absorbed exactly into the covariance
/// `C/(1+σ)`; only `e^{zW}` is carried as an importance weight.
pub fn mc_truncated_correlation(torus: Torus, z: f64, sigma: f64, field: &ExternalFieldSpec, opts: &McOptions) -> Result<MCEstimate> {
    check_mc_inputs(torus, sigma, field, opts)?;
    let obs = Observables::new(torus, field);
    let m = obs.m();
    let cov = CovarianceSpec::InverseLaplacian { sigma };
    let chains = run_chains(torus, &cov, opts, |s, count| sample_moments(torus, z, &obs, s, count))?;
    batch_estimate(&chains, opts, |mom| cumulant_from_moments(m, mom))
}

/// The observables of a field spec on one sample, averaged over translations;
/// used to check invariance under `φ → φ + c`.
pub fn observable_moments(torus: Torus, field: &ExternalFieldSpec, phi: &Field) -> Result<Vec<Complex64>> {
    field.validate(torus.d)?;
    let obs = Observables::new(torus, field);
    let grads = crate::lattice::torus_gradients(phi);
    let density = site_density(torus, &grads);
    Ok(obs.subset_moments(&grads, &density))
}

/// The `m = 2` linear-source correlation as `−∂_{t1}∂_{t2} log E[e^{i t·O}]`
/// by central differences at steps `a/4` and `a/8`, Richardson extrapolated.
pub fn fd_cross_check(torus: Torus, z: f64, sigma: f64, field: &ExternalFieldSpec, opts: &McOptions) -> Result<MCEstimate> {
    check_mc_inputs(torus, sigma, field, opts)?;
    if field.variant != FieldVariant::GradientLinear || field.m() != 2 {
        return invalid("the finite-difference check needs two linear gradient sources");
    }
    let obs = Observables::new(torus, field);
    let hs = [field.radius / 4.0, field.radius / 8.0];
    let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
    let cov = CovarianceSpec::InverseLaplacian { sigma };
    let n = torus.volume();
    let chains = run_chains(torus, &cov, opts, |s, count| {
        let mut log_weights = Vec::with_capacity(count);
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let phi = s.sample();
            let grads = crate::lattice::torus_gradients(&phi);
            let density = if z != 0.0 { site_density(torus, &grads) } else { Vec::new() };
            log_weights.push(z * density.iter().sum::<f64>());
            let mut row = vec![Complex64::new(0.0, 0.0); 8];
            for t in 0..n {
                let o1 = obs.value(0, t, &grads, &density).re;
                let o2 = obs.value(1, t, &grads, &density).re;
                for (hi, h) in hs.iter().enumerate() {
                    for (si, (a, b)) in signs.iter().enumerate() {
                        row[hi * 4 + si] += (h * (a * o1 + b * o2)).cos();
                    }
                }
            }
            moments.push(row.iter().map(|v| v / n as f64).collect());
        }
        WeightedMoments { log_weights, moments }
    })?;
    batch_estimate(&chains, opts, |mom| {
        let dd = |hi: usize| {
            let f: Vec<f64> = (0..4).map(|si| mom[hi * 4 + si].re.ln()).collect();
            -(f[0] - f[1] - f[2] + f[3]) / (4.0 * hs[hi] * hs[hi])
        };
        Complex64::new((4.0 * dd(1) - dd(0)) / 3.0, 0.0)
    })
}

/// `E_C[e^{zW}]`; identically 1 at `z = 0`.
pub fn mc_partition_ratio(torus: Torus, z: f64, opts: &McOptions) -> Result<MCEstimate> {
    opts.validate()?;
    let cov = CovarianceSpec::InverseLaplacian { sigma: 0.0 };
    let chains = run_chains(torus, &cov, opts, |s, count| {
        let moments = (0..count)
            .map(|_| {
                if z == 0.0 {
                    return vec![Complex64::new(1.0, 0.0)];
                }
                let grads = crate::lattice::torus_gradients(&s.sample());
                let w: f64 = site_density(torus, &grads).iter().sum();
                vec![Complex64::new((z * w).exp(), 0.0)]
            })
            .collect();
        WeightedMoments { log_weights: vec![0.0; count], moments }
    })?;
    batch_estimate(&chains, opts, |mom| mom[0])
}

/// `|Λ|^{−1} log Z″(σ) = −½ log(1+σ) (|Λ|−1)/|Λ|`: each nonzero mode
/// contributes a Gaussian factor `(1+σ)^{−1/2}`.
pub fn quadratic_partition_exact(volume: usize, sigma: f64) -> Result<f64> {
    if sigma <= -1.0 {
        return Err(Error::Domain(vec![]));
    }
    if volume == 0 {
        return invalid("empty volume");
    }
    let v = volume as f64;
    Ok(-0.5 * sigma.ln_1p() * (v - 1.0) / v)
}

/// Monte Carlo for `|Λ|^{−1} log Z″(σ)` by thermodynamic integration:
/// `d/ds log Z(s) = −⟨V⟩_s` with `⟨·⟩_s` the Gaussian of covariance `C/(1+s)`,
/// sampled exactly, and Gauss–Legendre nodes in `s`.
pub fn quadratic_partition_mc(torus: Torus, sigma: f64, nodes: usize, opts: &McOptions) -> Result<MCEstimate> {
    opts.validate()?;
    if sigma <= -1.0 {
        return Err(Error::Domain(vec![]));
    }
    let nodes = nodes.max(1);
    let rule = gauss_legendre(nodes);
    let vol = torus.volume() as f64;
    let mut mean = 0.0;
    let mut var = 0.0;
    for (i, (x, w)) in rule.0.iter().zip(&rule.1).enumerate() {
        let s = 0.5 * sigma * (x + 1.0);
        let ws = 0.5 * sigma * w;
        let cov = CovarianceSpec::InverseLaplacian { sigma: s };
        let node_opts = McOptions { seed: opts.seed.wrapping_add(i as u64 * 0x9E37_79B9), ..*opts };
        let chains = run_chains(torus, &cov, &node_opts, |smp, count| {
            (0..count).map(|_| crate::lattice::torus_energy(&smp.sample())).sum::<f64>() / count as f64
        })?;
        let b = chains.len() as f64;
        let m = chains.iter().sum::<f64>() / b;
        let v = chains.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (b - 1.0) / b;
        mean += -ws * m / vol;
        var += (ws / vol).powi(2) * v;
    }
    Ok(MCEstimate {
        mean,
        imag: 0.0,
        stderr: var.sqrt(),
        samples: opts.per_chain() * opts.chains * nodes,
        seed: opts.seed,
        ess: (opts.per_chain() * opts.chains) as f64,
    })
}

/// `η = min{d/2, 2}`.
pub fn eta(d: usize) -> f64 {
    (d as f64 / 2.0).min(2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayPoint {
    pub separation: i64,
    pub estimate: MCEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayExponentFit {
    pub points: Vec<DecayPoint>,
    /// Fitted `p` in `|⟨∂φ(0)∂φ(x)⟩ᵗ| ~ |x|^{−p}`.
    pub exponent: f64,
    pub stderr: f64,
    pub eta: f64,
    pub epsilon: f64,
    /// `exponent ≥ η − ε`.
    pub satisfies_bound: bool,
}

/// Fits the decay of the longitudinal gradient-gradient correlation along an
/// axis.
pub fn decay_exponent_fit(
    torus: Torus,
    z: f64,
    sigma: f64,
    direction: i32,
    separations: &[i64],
    epsilon: f64,
    opts: &McOptions,
) -> Result<DecayExponentFit> {
    let dir = Direction::new(direction, torus.d)?;
    if separations.len() < 2 || separations.iter().any(|&r| r <= 0) {
        return invalid("need at least two positive separations");
    }
    let (lo, hi) = (separations.iter().min().unwrap(), separations.iter().max().unwrap());
    if *hi < 4 * lo {
        return invalid("separations must span at least a factor 4");
    }
    if *hi as usize >= torus.side {
        return invalid("separations must be smaller than the torus side");
    }
    let mut points = Vec::new();
    for &r in separations {
        let x = dir.unit(torus.d).iter().map(|c| c * r).collect();
        let spec = ExternalFieldSpec::gradient(vec![vec![0; torus.d], x], vec![dir.value(), dir.value()]);
        let est = mc_truncated_correlation(torus, z, sigma, &spec, opts)?;
        if est.mean.abs() < 2.0 * est.stderr {
            return Err(Error::UnreliableEstimate(format!(
                "correlation at separation {r} is {:.3e} ± {:.3e}",
                est.mean, est.stderr
            )));
        }
        points.push(DecayPoint { separation: r, estimate: est });
    }
    // weighted least squares of log|c| against log r
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &points {
        let x = (p.separation as f64).ln();
        let y = p.estimate.mean.abs().ln();
        let w = (p.estimate.mean / p.estimate.stderr.max(1e-300)).powi(2);
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let den = sw * sxx - sx * sx;
    if den.abs() < 1e-300 {
        return Err(Error::DegenerateFit("separations do not determine a slope".into()));
    }
    let slope = (sw * sxy - sx * sy) / den;
    let stderr = (sw / den).sqrt();
    let eta = eta(torus.d);
    Ok(DecayExponentFit { points, exponent: -slope, stderr, eta, epsilon, satisfies_bound: -slope >= eta - epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        v.iter().map(|c| c / n).collect()
    }

    #[test]
    fn config_rejects_non_unit_moments() {
        assert!(DipoleConfig::new(2, vec![(vec![0, 0], vec![1.0, 1.0])]).is_err());
        assert!(DipoleConfig::new(2, vec![(vec![0, 0], unit(&[1.0, 1.0]))]).is_ok());
    }

    #[test]
    fn pair_energy_small_cases() {
        let c = Kernel::from_fn(3, 4, |x| 1.0 / (1.0 + crate::lattice::norm2(x)));
        assert_eq!(pair_energy(&DipoleConfig::empty(3), &c).unwrap(), 0.0);
        let p = unit(&[1.0, 2.0, -0.5]);
        let one = DipoleConfig::new(3, vec![(vec![0, 0, 0], p.clone())]).unwrap();
        let mut expect = 0.0;
        for mu in Direction::positive(3) {
            for nu in Direction::positive(3) {
                expect += p[mu.axis()] * p[nu.axis()] * c.grad_grad(&[0, 0, 0], mu, nu).unwrap();
            }
        }
        assert!((pair_energy(&one, &c).unwrap() - expect).abs() < 1e-15);
        let q = unit(&[0.0, 1.0, 1.0]);
        let a = DipoleConfig::new(3, vec![(vec![0, 0, 0], p.clone()), (vec![1, 2, 0], q.clone())]).unwrap();
        let b = DipoleConfig::new(3, vec![(vec![1, 2, 0], q), (vec![0, 0, 0], p)]).unwrap();
        assert!((pair_energy(&a, &c).unwrap() - pair_energy(&b, &c).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn pair_energy_reports_coverage() {
        let c = Kernel::from_fn(3, 2, |_| 1.0);
        let a = DipoleConfig::new(3, vec![(vec![0, 0, 0], vec![1.0, 0.0, 0.0]), (vec![5, 0, 0], vec![1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(pair_energy(&a, &c), Err(Error::Coverage(_))));
    }

    #[test]
    fn cos_moment_closed_forms() {
        for d in 1..6 {
            assert_eq!(sphere_cos_moment(d, &vec![0.0; d]), 1.0);
        }
        assert!((sphere_cos_moment(1, &[2.0]) - 2f64.cos()).abs() < 1e-15);
        assert!((sphere_cos_moment(3, &[0.0, 1.0, 0.0]) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn w_energy_trivial_cases() {
        let phi = Field::from_fn(2, 5, Geometry::Torus, |x| (x[0] * 3 + x[1]) as f64 * 0.7);
        let region: Vec<Site> = phi.sites().collect();
        assert!((w_energy(&phi, &region, 0.0).unwrap() - 25.0).abs() < 1e-12);
        let flat = Field::from_fn(2, 5, Geometry::Torus, |_| 2.5);
        assert!((w_energy(&flat, &region, 1.3).unwrap() - 25.0).abs() < 1e-12);
        assert!(w_energy(&phi, &region, 1.0).unwrap().abs() <= 25.0);
    }

    #[test]
    fn sphere_rule_integrates_second_moments() {
        for d in 1..=3 {
            let r = SphereRule::new(d, 6).unwrap();
            let total: f64 = r.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-14);
            for m in 0..d {
                let s: f64 = r.points.iter().zip(&r.weights).map(|(p, w)| w * p[m] * p[m]).sum();
                assert!((s - 1.0 / d as f64).abs() < 1e-14, "d={d}");
            }
        }
    }

    #[test]
    fn partitions_are_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52];
        for m in 1..6 {
            assert_eq!(set_partitions(m).len(), bell[m]);
        }
    }

    #[test]
    fn cumulant_of_constants_vanishes() {
        // moments of a point mass at (a, b, c)
        let vals = [1.5, -0.5, 2.0];
        let moments: Vec<Complex64> = (0..8usize)
            .map(|s| Complex64::new((0..3).filter(|k| s >> k & 1 == 1).map(|k| vals[k]).product(), 0.0))
            .collect();
        assert!(cumulant_from_moments(2, &moments[..4]).norm() < 1e-14);
        assert!(cumulant_from_moments(3, &moments).norm() < 1e-14);
    }

    #[test]
    fn torus_covariance_inverts_laplacian() {
        let t = Torus::new(3, 4).unwrap();
        let c = torus_covariance(t, &CovarianceSpec::InverseLaplacian { sigma: 0.0 }).unwrap();
        let k = periodic_kernel(t, &c);
        let lap = k.neg_laplacian();
        let n = t.volume() as f64;
        for x in lap.sites().filter(|x| x.iter().all(|c| (0..4).contains(c))) {
            let expect = if x.iter().all(|&c| c == 0) { 1.0 - 1.0 / n } else { -1.0 / n };
            assert!((lap.get(&x).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_rejects_negative_symbols() {
        let t = Torus::new(2, 6).unwrap();
        let cov = CovarianceSpec::InverseLaplacian { sigma: 0.0 };
        let a: Vec<Field> = gaussian_sampler(t, &cov, 7, 3).unwrap().collect();
        let b: Vec<Field> = gaussian_sampler(t, &cov, 7, 3).unwrap().collect();
        assert_eq!(a, b);
        let mut s = vec![1.0; 36];
        s[5] = -0.5;
        assert!(matches!(SpectralSampler::new(t, &s, 1, 0), Err(Error::InvalidCovariance(_))));
    }

    #[test]
    fn quadratic_partition_closed_form() {
        assert_eq!(quadratic_partition_exact(81, 0.0).unwrap(), 0.0);
        let v = quadratic_partition_exact(81, 0.5).unwrap();
        assert!((v + 0.5 * 1.5f64.ln() * 80.0 / 81.0).abs() < 1e-15);
        assert!(matches!(quadratic_partition_exact(81, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta(3), 1.5);
        assert_eq!(eta(4), 2.0);
        assert_eq!(eta(5), 2.0);
    }
}
