//! The truncated renormalization group flow.
//!
//! Activities are kept to second order in the field. Bulk activities are
//! translation invariant, so they are stored per size class of small sets
//! rather than per set. The external field channel keeps, for every subset
//! `S` of source points, the Gaussian covariance integrated so far and the
//! amount already moved into the energy.

use crate::error::{invalid, Error, Result};
use crate::frd::{build_decomposition_with, trace_term, FrdOptions, RangeDecomposition};
use crate::gas::{cumulant_from_moments, ExternalFieldSpec, FieldVariant, SphereRule};
use crate::kernels::Kernel;
use crate::lattice::{Direction, Site};
use crate::polymers::{block_of_site, n_constants, star_of_polymer_contains, Adjacency, Polymer};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowConfig {
    pub d: usize,
    pub l: u64,
    pub adjacency: Adjacency,
    /// Field scale `h` of the norms.
    pub h: f64,
    /// Large-set weight `A`.
    pub norm_a: f64,
    /// Norms above this abort the flow.
    pub norm_bound: f64,
    /// Random linear probes besides the zero field and the coordinate fields.
    pub probes: usize,
    pub probe_seed: u64,
    /// Largest `|α_{μν} − α̂_{μν}|` accepted by the symmetric fit.
    pub symmetry_tol: f64,
    pub frd: FrdOptions,
    /// Sphere rule order for the dipole density channel.
    pub sphere_order: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            d: 3,
            l: 5,
            adjacency: Adjacency::King,
            h: 1.0,
            norm_a: 16.0,
            norm_bound: 1e6,
            probes: 4,
            probe_seed: 1,
            symmetry_tol: 1e-10,
            frd: FrdOptions { tol: 1e-8, table_radius: 2, recurrence_cap: 400_000 },
            sphere_order: 6,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::UnsupportedDimension { d: self.d, reason: "the flow needs d >= 3".into() });
        }
        if self.l < 3 || self.l % 2 == 0 {
            return invalid("L must be odd and at least 3");
        }
        if !(self.h > 0.0 && self.norm_a >= 1.0 && self.norm_bound > 0.0) {
            return invalid("need h > 0, A >= 1 and a positive norm bound");
        }
        if self.frd.table_radius < 1 {
            return invalid("kernel tables need radius at least 1");
        }
        Ok(())
    }
}

/// `∂^x_μ ∂^y_ν Γ(x − y)` at displacement `r`.
pub trait GradGrad {
    fn d(&self) -> usize;
    fn grad_grad(&self, r: &[i64], mu: Direction, nu: Direction) -> Result<f64>;
}

impl GradGrad for Kernel {
    fn d(&self) -> usize {
        Kernel::d(self)
    }

    fn grad_grad(&self, r: &[i64], mu: Direction, nu: Direction) -> Result<f64> {
        Kernel::grad_grad(self, r, mu, nu)
    }
}

/// `Γ_j` of a decomposition, evaluated off the table when needed.
pub struct ScaleCovariance<'a> {
    pub rd: &'a RangeDecomposition,
    pub j: usize,
}

impl GradGrad for ScaleCovariance<'_> {
    fn d(&self) -> usize {
        self.rd.d
    }

    fn grad_grad(&self, r: &[i64], mu: Direction, nu: Direction) -> Result<f64> {
        self.rd.gamma_grad_grad(self.j, r, mu, nu)
    }
}

/// The activity shared by every small set with `size` blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeClass {
    pub size: usize,
    /// Small sets of this size containing a fixed block.
    pub sets: f64,
    /// Value at `φ = 0`.
    pub v: f64,
    /// `q_{ab}` over positive axes, row major `d × d`.
    pub q: Vec<f64>,
}

impl SizeClass {
    /// `Q_{μν} = sign(μ) sign(ν) q_{|μ||ν|}`.
    pub fn q_signed(&self, d: usize, mu: Direction, nu: Direction) -> f64 {
        (mu.sign() * nu.sign()) as f64 * self.q[mu.axis() * d + nu.axis()]
    }

    /// `v + ½ Σ q_{ab} g_a g_b` on the linear field `g·x`.
    pub fn eval_linear(&self, g: &[f64]) -> f64 {
        let d = g.len();
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += self.q[a * d + b] * g[a] * g[b];
            }
        }
        self.v + 0.5 * s
    }
}

/// Source data of the external field channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSources {
    pub variant: FieldVariant,
    pub points: Vec<Site>,
    /// Per point the measured directions: one for gradient sources, every
    /// positive axis for the dipole density.
    pub directions: Vec<Vec<Direction>>,
    /// `a_k` in the coefficient `∏ (i a_k)`.
    pub prefactor: Vec<f64>,
    pub radius: f64,
    /// Covariance of all measured variables integrated so far, row major.
    pub cov: Vec<f64>,
}

impl FieldSources {
    fn nvars(&self) -> usize {
        self.directions.iter().map(|v| v.len()).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.points.len());
        let mut o = 0;
        for v in &self.directions {
            out.push(o);
            o += v.len();
        }
        out
    }

    fn add_covariance(&mut self, gamma: &dyn GradGrad) -> Result<()> {
        let n = self.nvars();
        let off = self.offsets();
        for (k, xk) in self.points.iter().enumerate() {
            for (l, xl) in self.points.iter().enumerate() {
                let r: Site = xk.iter().zip(xl).map(|(a, b)| a - b).collect();
                for (a, &mu) in self.directions[k].iter().enumerate() {
                    for (b, &nu) in self.directions[l].iter().enumerate() {
                        self.cov[(off[k] + a) * n + off[l] + b] += gamma.grad_grad(&r, mu, nu)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One Taylor coefficient `t^S` of the field channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldTerm {
    /// Bit mask of `S` over the source points.
    pub mask: u32,
    /// The coefficient still carried by the activity.
    pub value: Complex64,
    /// The amount already moved into the energy.
    pub extracted: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorActivity {
    pub j: usize,
    pub d: usize,
    pub l: u64,
    pub adjacency: Adjacency,
    pub bulk: Vec<SizeClass>,
    pub sources: Option<FieldSources>,
    pub terms: Vec<FieldTerm>,
}

impl TaylorActivity {
    pub fn zero(d: usize, l: u64, adjacency: Adjacency, j: usize) -> Result<Self> {
        let n = n_constants(d, adjacency)?;
        let bulk = (1..=n.counts.len())
            .map(|s| SizeClass { size: s, sets: n.sets_of_size(s) as f64, v: 0.0, q: vec![0.0; d * d] })
            .collect();
        Ok(TaylorActivity { j, d, l, adjacency, bulk, sources: None, terms: Vec::new() })
    }

    /// The `j`-blocks meeting the points of `S`.
    pub fn support(&self, mask: u32) -> Polymer {
        let pts = self.sources.as_ref().map_or(&[][..], |s| &s.points[..]);
        let blocks = pts
            .iter()
            .enumerate()
            .filter(|(k, _)| mask & (1 << k) != 0)
            .map(|(_, x)| block_of_site(x, self.j as u32, self.l));
        Polymer::new(self.j as u32, blocks)
    }

    pub fn is_bulk_zero(&self) -> bool {
        self.bulk.iter().all(|c| c.v == 0.0 && c.q.iter().all(|&x| x == 0.0))
    }
}

/// `K_0 = (e^{W_0} − 1) e^{−σ_0 V_0}` per block with
/// `W_0 = z ∫cos(√(1+σ_0) p·∂φ) dp` and `V_0 = ½|∂φ|²`, expanded to second
/// order; a small set carries the product over its blocks.
pub fn init_mayer(cfg: &FlowConfig, z: f64, sigma0: f64, field: &ExternalFieldSpec) -> Result<TaylorActivity> {
    cfg.validate()?;
    if !z.is_finite() || !sigma0.is_finite() {
        return invalid("z and σ0 must be finite");
    }
    if sigma0 <= -1.0 {
        return Err(Error::Domain(vec![]));
    }
    let d = cfg.d;
    let mut k = TaylorActivity::zero(d, cfg.l, cfg.adjacency, 0)?;
    let v1 = z.exp_m1();
    let q1 = -(z * z.exp() * (1.0 + sigma0) / d as f64 + sigma0 * v1);
    for c in k.bulk.iter_mut() {
        let s = c.size as i32;
        c.v = v1.powi(s);
        let qs = s as f64 * v1.powi(s - 1) * q1;
        for a in 0..d {
            c.q[a * d + a] = qs;
        }
    }
    if field.variant != FieldVariant::None {
        field.validate(d)?;
        let m = field.m();
        if m == 0 || m > 8 {
            return invalid("the field channel supports 1 to 8 points");
        }
        if field.variant == FieldVariant::General && m > 3 {
            return invalid("the dipole density channel supports at most 3 points");
        }
        let directions: Vec<Vec<Direction>> = match field.variant {
            FieldVariant::General => (0..m).map(|_| Direction::positive(d)).collect(),
            _ => field.directions.iter().map(|&mu| Direction::new(mu, d)).collect::<Result<Vec<_>>>()?.into_iter().map(|x| vec![x]).collect(),
        };
        let n: usize = directions.iter().map(|v| v.len()).sum();
        k.sources = Some(FieldSources {
            variant: field.variant,
            points: field.points.clone(),
            directions,
            prefactor: vec![z.exp(); m],
            radius: field.radius,
            cov: vec![0.0; n * n],
        });
        k.terms = (1..(1u32 << m)).map(|mask| FieldTerm { mask, value: ZERO, extracted: ZERO }).collect();
        refresh_terms(&mut k, cfg.sphere_order)?;
    }
    Ok(k)
}

/// Joint cumulants of the point observables under the accumulated
/// covariance, indexed by subset mask.
fn cumulants(src: &FieldSources, sphere_order: usize) -> Result<Vec<Complex64>> {
    let m = src.points.len();
    let n = src.nvars();
    let full = 1usize << m;
    let mut kappa = vec![ZERO; full];
    match src.variant {
        FieldVariant::GradientLinear => {
            for k in 0..m {
                for l in k + 1..m {
                    kappa[(1 << k) | (1 << l)] = Complex64::new(src.cov[k * n + l], 0.0);
                }
            }
        }
        FieldVariant::GradientExponential | FieldVariant::General => {
            let moments: Vec<Complex64> = if src.variant == FieldVariant::GradientExponential {
                (0..full)
                    .map(|t| {
                        let mut s = 0.0;
                        for k in 0..m {
                            for l in 0..m {
                                if t & (1 << k) != 0 && t & (1 << l) != 0 {
                                    s += src.cov[k * n + l];
                                }
                            }
                        }
                        Complex64::new((-0.5 * s).exp(), 0.0)
                    })
                    .collect()
            } else {
                density_moments(src, sphere_order)?
            };
            for mask in 1..full {
                let idx: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
                let sub: Vec<Complex64> = (0..1usize << idx.len())
                    .map(|t| {
                        let orig = idx.iter().enumerate().filter(|(b, _)| t & (1 << b) != 0).fold(0, |a, (_, &k)| a | (1 << k));
                        moments[orig]
                    })
                    .collect();
                kappa[mask] = cumulant_from_moments(idx.len(), &sub);
            }
        }
        FieldVariant::None => {}
    }
    Ok(kappa)
}

/// `E[∏_{k∈T} ∫cos(p_k·∂φ(x_k)) dp_k] = ∫ exp(−½ Σ p_k G_{kl} p_l) ∏dp_k`.
fn density_moments(src: &FieldSources, order: usize) -> Result<Vec<Complex64>> {
    let m = src.points.len();
    let n = src.nvars();
    let d = src.directions[0].len();
    let rule = SphereRule::new(d, order)?;
    let off = src.offsets();
    let mut out = vec![Complex64::new(1.0, 0.0); 1 << m];
    for t in 1usize..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|k| t & (1 << k) != 0).collect();
        let r = idx.len();
        let mut acc = 0.0;
        let total = rule.len().pow(r as u32);
        for flat in 0..total {
            let mut f = flat;
            let mut w = 1.0;
            let mut pick = Vec::with_capacity(r);
            for _ in 0..r {
                let i = f % rule.len();
                f /= rule.len();
                w *= rule.weights[i];
                pick.push(&rule.points[i]);
            }
            let mut e = 0.0;
            for (a, &k) in idx.iter().enumerate() {
                for (b, &l) in idx.iter().enumerate() {
                    for u in 0..d {
                        for v in 0..d {
                            e += pick[a][u] * src.cov[(off[k] + u) * n + off[l] + v] * pick[b][v];
                        }
                    }
                }
            }
            acc += w * (-0.5 * e).exp();
        }
        out[t] = Complex64::new(acc, 0.0);
    }
    Ok(out)
}

/// `value_S = ∏_{k∈S}(i a_k) κ_S − extracted_S`.
fn refresh_terms(k: &mut TaylorActivity, sphere_order: usize) -> Result<()> {
    let Some(src) = &k.sources else { return Ok(()) };
    let kappa = cumulants(src, sphere_order)?;
    for term in k.terms.iter_mut() {
        let c = (0..src.points.len())
            .filter(|p| term.mask & (1 << p) != 0)
            .fold(Complex64::new(1.0, 0.0), |acc, p| acc * I * src.prefactor[p]);
        term.value = c * kappa[term.mask as usize] - term.extracted;
    }
    Ok(())
}

/// `K^#(X, φ) = E_Γ K(X, φ + ζ)`, exact in the quadratic model.
pub fn fluctuation_sharp(k: &TaylorActivity, gamma: &dyn GradGrad) -> Result<TaylorActivity> {
    fluctuation_sharp_with(k, gamma, FlowConfig::default().sphere_order)
}

pub fn fluctuation_sharp_with(k: &TaylorActivity, gamma: &dyn GradGrad, sphere_order: usize) -> Result<TaylorActivity> {
    let d = k.d;
    if gamma.d() != d {
        return invalid("covariance dimension does not match the activity");
    }
    let origin = vec![0i64; d];
    let pos = Direction::positive(d);
    let mut g0 = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            g0[a * d + b] = gamma.grad_grad(&origin, pos[a], pos[b])?;
        }
    }
    let mut out = k.clone();
    for c in out.bulk.iter_mut() {
        c.v += 0.5 * c.q.iter().zip(&g0).map(|(q, g)| q * g).sum::<f64>();
    }
    if let Some(src) = out.sources.as_mut() {
        src.add_covariance(gamma)?;
        refresh_terms(&mut out, sphere_order)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockEnergy {
    pub j: usize,
    pub block: Site,
    /// Field channel energy per subset mask.
    pub coefficients: BTreeMap<u32, Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Beta {
    /// `β(B) = −Σ_{X ∋ B} v^#(X)/|X|` for the bulk.
    pub bulk: f64,
    pub field: Vec<BlockEnergy>,
}

pub fn extract_beta(k: &TaylorActivity) -> Beta {
    let bulk = -k.bulk.iter().map(|c| c.sets * c.v / c.size as f64).sum::<f64>();
    let mut per_block: BTreeMap<Site, BTreeMap<u32, Complex64>> = BTreeMap::new();
    for term in &k.terms {
        let x = k.support(term.mask);
        if term.value == ZERO || !x.is_small(k.d, k.adjacency) {
            continue;
        }
        let share = -term.value / x.len() as f64;
        for b in x.blocks() {
            *per_block.entry(b.clone()).or_default().entry(term.mask).or_insert(ZERO) += share;
        }
    }
    let field = per_block.into_iter().map(|(block, coefficients)| BlockEnergy { j: k.j, block, coefficients }).collect();
    Beta { bulk, field }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alpha {
    /// `α_{μν}` over signed directions, row major `2d × 2d` in the order of
    /// [`Direction::all`].
    pub table: Vec<f64>,
    /// The symmetric fit `α̂_{μν} = (α/2)(δ_{μν} − δ_{μ,−ν})`.
    pub alpha: f64,
    /// `α' = α δ_{μν}` on positive axes.
    pub alpha_prime: Vec<f64>,
    pub residual: f64,
}

/// `α_{μν}(B) = −½ |B|^{-1} Σ_{X ∋ B} Q^#_{μν}(X)/|X|` and its symmetric fit.
pub fn extract_alpha(k: &TaylorActivity, tol: f64) -> Result<Alpha> {
    let d = k.d;
    let dirs = Direction::all(d);
    let vol = (k.l as f64).powi((d * k.j) as i32);
    let nd = dirs.len();
    let mut table = vec![0.0; nd * nd];
    for (i, &mu) in dirs.iter().enumerate() {
        for (t, &nu) in dirs.iter().enumerate() {
            let s: f64 = k.bulk.iter().map(|c| c.sets * c.q_signed(d, mu, nu) / c.size as f64).sum();
            table[i * nd + t] = -0.5 * s / vol;
        }
    }
    let w = |mu: Direction, nu: Direction| {
        if mu == nu {
            1.0
        } else if mu == nu.neg() {
            -1.0
        } else {
            0.0
        }
    };
    let mut proj = 0.0;
    for (i, &mu) in dirs.iter().enumerate() {
        for (t, &nu) in dirs.iter().enumerate() {
            proj += table[i * nd + t] * w(mu, nu);
        }
    }
    let alpha = proj / (2 * d) as f64;
    let mut residual: f64 = 0.0;
    for (i, &mu) in dirs.iter().enumerate() {
        for (t, &nu) in dirs.iter().enumerate() {
            residual = residual.max((table[i * nd + t] - 0.5 * alpha * w(mu, nu)).abs());
        }
    }
    if !(residual <= tol * alpha.abs().max(1.0)) {
        return Err(Error::SymmetryViolation(format!("anisotropic remainder {residual:e}")));
    }
    let mut alpha_prime = vec![0.0; d * d];
    for a in 0..d {
        alpha_prime[a * d + a] = alpha;
    }
    Ok(Alpha { table, alpha, alpha_prime, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowState {
    pub j: usize,
    pub sigma: f64,
    pub activity: TaylorActivity,
    /// Bulk energy per `j`-block produced by the step into this scale.
    pub e_bulk: f64,
    /// Field energies on `(j−1)`-blocks from the same step.
    pub e_field: Vec<BlockEnergy>,
    pub norm_k: f64,
    pub norm_f: f64,
    /// `‖K_j‖ / ‖K_{j−1}‖`, zero when both vanish.
    pub ratio: f64,
}

/// Test fields for the empirical norm: zero, the coordinate fields `x_μ`
/// and seeded Gaussian linear fields, as gradient vectors.
pub fn probe_battery(cfg: &FlowConfig) -> Vec<Vec<f64>> {
    let d = cfg.d;
    let mut out = vec![vec![0.0; d]];
    for a in 0..d {
        let mut g = vec![0.0; d];
        g[a] = 1.0;
        out.push(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.probe_seed);
    for _ in 0..cfg.probes {
        out.push((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    out
}

/// `max_X A^{|X|} sup_φ |K(X, φ)| / G(φ)` over the probes, each rescaled to
/// unit `Φ_j` norm where `G = e`.
pub fn empirical_norm(k: &TaylorActivity, cfg: &FlowConfig) -> f64 {
    let scale = cfg.h / (k.l as f64).powf(0.5 * (k.d * k.j) as f64);
    let mut best: f64 = 0.0;
    for g in probe_battery(cfg) {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (gs, reg): (Vec<f64>, f64) = if gmax == 0.0 {
            (g.clone(), 1.0)
        } else {
            (g.iter().map(|v| v * scale / gmax).collect(), std::f64::consts::E)
        };
        for c in &k.bulk {
            best = best.max(cfg.norm_a.powi(c.size as i32) * c.eval_linear(&gs).abs() / reg);
        }
    }
    best
}

/// `max_X A^{|X|} Σ_S |value_S| a^{|S|}` over supports `X`.
pub fn field_norm(k: &TaylorActivity, cfg: &FlowConfig) -> f64 {
    let Some(src) = &k.sources else { return 0.0 };
    let mut per: HashMap<Polymer, f64> = HashMap::new();
    for t in &k.terms {
        *per.entry(k.support(t.mask)).or_default() += t.value.norm() * src.radius.powi(t.mask.count_ones() as i32);
    }
    per.into_iter().map(|(x, v)| cfg.norm_a.powi(x.len() as i32) * v).fold(0.0, f64::max)
}

/// Field terms whose support star misses every source point. Always empty
/// for a well-formed activity.
pub fn field_support_violations(k: &TaylorActivity) -> usize {
    let Some(src) = &k.sources else { return 0 };
    k.terms
        .iter()
        .filter(|t| t.value != ZERO)
        .filter(|t| {
            let x = k.support(t.mask);
            !src.points.iter().any(|p| {
                let b = block_of_site(p, k.j as u32, k.l);
                star_of_polymer_contains(k.d, k.adjacency, &x, &b)
            })
        })
        .count()
}

/// Decompositions shared within the process.
pub fn decomposition(cfg: &FlowConfig, j_max: usize) -> Result<Arc<RangeDecomposition>> {
    type Key = (usize, u64, usize, usize, u64);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<RangeDecomposition>>>> = OnceLock::new();
    let key = (cfg.d, cfg.l, j_max, cfg.frd.table_radius, cfg.frd.tol.to_bits());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rd) = cache.lock().unwrap().get(&key) {
        return Ok(rd.clone());
    }
    let rd = Arc::new(build_decomposition_with(cfg.d, cfg.l, j_max, cfg.frd)?);
    cache.lock().unwrap().insert(key, rd.clone());
    Ok(rd)
}

pub fn initial_state(cfg: &FlowConfig, z: f64, sigma0: f64, field: &ExternalFieldSpec) -> Result<FlowState> {
    let activity = init_mayer(cfg, z, sigma0, field)?;
    let norm_k = empirical_norm(&activity, cfg);
    let norm_f = field_norm(&activity, cfg);
    Ok(FlowState { j: 0, sigma: sigma0, activity, e_bulk: 0.0, e_field: Vec::new(), norm_k, norm_f, ratio: 0.0 })
}

/// One step `j → j+1`: integrate `Γ_{j+1}`, extract `β` and `α`, update
/// `σ`, reblock what remains.
pub fn step(state: &FlowState, rd: &RangeDecomposition, cfg: &FlowConfig) -> Result<FlowState> {
    let j = state.j;
    if j + 1 > rd.j_max {
        return invalid(format!("decomposition stops at scale {}", rd.j_max));
    }
    let sharp = fluctuation_sharp_with(&state.activity, &ScaleCovariance { rd, j: j + 1 }, cfg.sphere_order)?;
    let beta = extract_beta(&sharp);
    let alpha = extract_alpha(&sharp, cfg.symmetry_tol)?;
    let sigma = state.sigma + alpha.alpha;
    if sigma <= -1.0 || !sigma.is_finite() {
        return Err(Error::Divergence { scale: j + 1, reason: format!("σ = {sigma}") });
    }
    let ld = (cfg.l as f64).powi(cfg.d as i32);
    let e_bulk = ld * (trace_term(rd.gamma(j + 1), cfg.l, j, state.sigma)? + beta.bulk);
    let activity = reblock(&sharp)?;
    let norm_k = empirical_norm(&activity, cfg);
    let norm_f = field_norm(&activity, cfg);
    for (what, n) in [("bulk", norm_k), ("field", norm_f)] {
        if !(n <= cfg.norm_bound) {
            return Err(Error::Divergence { scale: j + 1, reason: format!("{what} norm {n:e}") });
        }
    }
    let ratio = if state.norm_k > 0.0 { norm_k / state.norm_k } else if norm_k == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(FlowState { j: j + 1, sigma, activity, e_bulk, e_field: beta.field, norm_k, norm_f, ratio })
}

/// Remove what was extracted and move to `(j+1)`-blocks.
///
/// In the bulk every small set loses its value and its isotropic quadratic
/// part; the remainder is the anisotropic part, already below the symmetry
/// tolerance, and is dropped. Field terms on small supports are moved into
/// the energy; the others are carried to the closure of their support.
pub fn reblock(sharp: &TaylorActivity) -> Result<TaylorActivity> {
    let mut out = TaylorActivity::zero(sharp.d, sharp.l, sharp.adjacency, sharp.j + 1)?;
    out.sources = sharp.sources.clone();
    out.terms = sharp
        .terms
        .iter()
        .map(|t| {
            if sharp.support(t.mask).is_small(sharp.d, sharp.adjacency) {
                FieldTerm { mask: t.mask, value: ZERO, extracted: t.extracted + t.value }
            } else {
                t.clone()
            }
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FlowStatus {
    Completed,
    Diverged { scale: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub config: FlowConfig,
    pub z: f64,
    pub sigma0: f64,
    pub states: Vec<FlowState>,
    pub status: FlowStatus,
    /// Whether `‖K_{j+1}‖ ≤ ½‖K_j‖` held for every `j ≥ 1`.
    pub geometric_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub j: usize,
    pub sigma: f64,
    #[serde(rename = "norm_K")]
    pub norm_k: f64,
    pub ratio: f64,
    #[serde(rename = "E_bulk")]
    pub e_bulk: f64,
    #[serde(rename = "fF_partial")]
    pub ff_partial: [f64; 2],
}

impl Trajectory {
    pub fn final_sigma(&self) -> f64 {
        self.states.last().map_or(self.sigma0, |s| s.sigma)
    }

    pub fn rows(&self) -> Vec<TrajectoryRow> {
        let ff = accumulate_ff(self).ok();
        let mut acc = ZERO;
        self.states
            .iter()
            .map(|s| {
                if let Some(f) = &ff {
                    if let Some(p) = f.partials.iter().find(|p| p.j == s.j) {
                        acc = p.partial;
                    }
                }
                TrajectoryRow { j: s.j, sigma: s.sigma, norm_k: s.norm_k, ratio: s.ratio, e_bulk: s.e_bulk, ff_partial: [acc.re, acc.im] }
            })
            .collect()
    }
}

/// Iterate from scale 0 to `j_max`. A divergence ends the trajectory early
/// and is recorded in its status.
pub fn run_flow(cfg: &FlowConfig, z: f64, sigma0: f64, field: &ExternalFieldSpec, j_max: usize) -> Result<Trajectory> {
    let rd = decomposition(cfg, j_max.max(1))?;
    run_flow_with(cfg, &rd, z, sigma0, field, j_max)
}

pub fn run_flow_with(
    cfg: &FlowConfig,
    rd: &RangeDecomposition,
    z: f64,
    sigma0: f64,
    field: &ExternalFieldSpec,
    j_max: usize,
) -> Result<Trajectory> {
    let mut states = vec![initial_state(cfg, z, sigma0, field)?];
    let mut status = FlowStatus::Completed;
    for _ in 0..j_max {
        match step(states.last().unwrap(), rd, cfg) {
            Ok(s) => states.push(s),
            Err(Error::Divergence { scale, reason }) => {
                status = FlowStatus::Diverged { scale, reason };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let geometric_decay = states.iter().skip(2).all(|s| s.ratio <= 0.5) && status == FlowStatus::Completed;
    Ok(Trajectory { config: cfg.clone(), z, sigma0, states, status, geometric_decay })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StableSigma {
    pub z: f64,
    pub sigma: f64,
    /// `|σ_J|` reached from `sigma`.
    pub residual: f64,
    pub iterations: usize,
    pub j_max: usize,
}

/// The `σ_0` whose flow ends at `σ_J = 0`, by Illinois false position on
/// `[−bracket, bracket]`.
pub fn stable_sigma(cfg: &FlowConfig, z: f64, field: &ExternalFieldSpec, j_max: usize, tol: f64, bracket: f64) -> Result<StableSigma> {
    if !(bracket > 0.0 && bracket < 1.0) {
        return invalid("bracket must lie in (0, 1)");
    }
    let rd = decomposition(cfg, j_max.max(1))?;
    let f = |s: f64| -> Result<f64> {
        let t = run_flow_with(cfg, &rd, z, s, field, j_max)?;
        match t.status {
            FlowStatus::Completed => Ok(t.final_sigma()),
            FlowStatus::Diverged { scale, reason } => Err(Error::Divergence { scale, reason }),
        }
    };
    let (mut a, mut b) = (-bracket, bracket);
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    let done = |s: f64, fs: f64, it: usize| StableSigma { z, sigma: s, residual: fs.abs(), iterations: it, j_max };
    if fa == 0.0 {
        return Ok(done(a, fa, 0));
    }
    if fb == 0.0 {
        return Ok(done(b, fb, 0));
    }
    if fa.signum() == fb.signum() {
        return Err(Error::BracketFailure { lo: a, hi: b });
    }
    let mut side = 0i8;
    for it in 1..=200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c)?;
        if fc.abs() <= tol || (b - a).abs() <= tol * 1e-3 {
            return Ok(done(c, fc, it));
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::ConvergenceFailure { achieved: fa.abs().min(fb.abs()), requested: tol })
}

/// Values of `σ_J(σ_0)` over a grid, for diagnosing bracket failures.
pub fn sigma_sweep(cfg: &FlowConfig, z: f64, field: &ExternalFieldSpec, j_max: usize, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let rd = decomposition(cfg, j_max.max(1))?;
    grid.iter().map(|&s| Ok((s, run_flow_with(cfg, &rd, z, s, field, j_max)?.final_sigma()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FFPartial {
    /// Scale of the blocks carrying the energy.
    pub j: usize,
    pub increment: Complex64,
    pub partial: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FFReport {
    pub m: usize,
    pub partials: Vec<FFPartial>,
    /// `Σ_j Σ_{B: star(B) ⊇ points} fF_j(B)`, the `t_1⋯t_m` coefficient.
    pub total: Complex64,
    /// `⟨∏ O_k⟩ᵗ = −(−i)^m · total`.
    pub correlation: Complex64,
    /// Whether the activity carried no field terms away from the points.
    pub support_ok: bool,
}

/// The full-mask field energy summed over blocks whose star holds every
/// point, scale by scale.
pub fn accumulate_ff(traj: &Trajectory) -> Result<FFReport> {
    let first = &traj.states[0].activity;
    let Some(src) = &first.sources else { return invalid("the trajectory has no external field") };
    let m = src.points.len();
    let full = (1u32 << m) - 1;
    let mut partial = ZERO;
    let mut partials = Vec::new();
    let mut support_ok = true;
    for s in &traj.states {
        support_ok &= field_support_violations(&s.activity) == 0;
        if s.j == 0 {
            continue;
        }
        let jb = s.j - 1;
        let mut inc = ZERO;
        for e in &s.e_field {
            let x = Polymer::new(jb as u32, [e.block.clone()]);
            let covers = src.points.iter().all(|p| {
                star_of_polymer_contains(first.d, first.adjacency, &x, &block_of_site(p, jb as u32, first.l))
            });
            if covers {
                inc += e.coefficients.get(&full).copied().unwrap_or(ZERO);
            }
        }
        partial += inc;
        partials.push(FFPartial { j: jb, increment: inc, partial });
    }
    let phase = (-I).powi(m as i32);
    Ok(FFReport { m, partials, total: partial, correlation: -phase * partial, support_ok })
}
