//! Translation-invariant kernels on ℤ^d, the lattice Coulomb kernel, and
//! stencil derivatives of kernels.

use crate::error::{Error, Result};
use crate::lattice::{norm1, norm2, norm_inf, Direction, Site};
use crate::quad::{integrate_orthant, integrate_points, InverseLaplacian, QuadOptions};
use serde::Serialize;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub const MAX_DERIVATIVE_ORDER: usize = 4;

/// A kernel tabulated on the cube `[-R, R]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    d: usize,
    radius: usize,
    values: Vec<f64>,
    /// `K(x) = 0` whenever `|x|_1 > range`.
    range: Option<i64>,
    symmetric: bool,
    /// Quadrature error estimate carried from construction.
    pub error: f64,
}

impl Kernel {
    pub fn from_fn(d: usize, radius: usize, f: impl Fn(&[i64]) -> f64) -> Self {
        let side = 2 * radius + 1;
        let mut values = vec![0.0; side.pow(d as u32)];
        let mut x = vec![0i64; d];
        for (i, v) in values.iter_mut().enumerate() {
            let mut r = i;
            for t in (0..d).rev() {
                x[t] = (r % side) as i64 - radius as i64;
                r /= side;
            }
            *v = f(&x);
        }
        Kernel { d, radius, values, range: None, symmetric: false, error: 0.0 }
    }

    /// Expand a table over `[0, R]^d` to the full cube, forcing every
    /// hyperoctahedral symmetry by reading the canonical representative.
    pub fn from_orthant(d: usize, radius: usize, orthant: &[f64]) -> Self {
        let m = radius + 1;
        let mut k = Kernel::from_fn(d, radius, |x| {
            let mut c: Vec<usize> = x.iter().map(|v| v.unsigned_abs() as usize).collect();
            c.sort_unstable();
            orthant[c.iter().fold(0, |acc, &v| acc * m + v)]
        });
        k.symmetric = true;
        k
    }

    pub fn delta(d: usize, radius: usize) -> Self {
        let mut k = Kernel::from_fn(d, radius, |x| if x.iter().all(|&c| c == 0) { 1.0 } else { 0.0 });
        k.range = Some(0);
        k.symmetric = true;
        k
    }

    pub fn with_range(mut self, range: Option<i64>) -> Self {
        self.range = range;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn range(&self) -> Option<i64> {
        self.range
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn index(&self, x: &[i64]) -> Option<usize> {
        let r = self.radius as i64;
        let side = 2 * self.radius + 1;
        let mut i = 0;
        for &c in x {
            if c.abs() > r {
                return None;
            }
            i = i * side + (c + r) as usize;
        }
        Some(i)
    }

    pub fn covers(&self, x: &[i64]) -> bool {
        self.index(x).is_some() || self.range.is_some_and(|r| norm1(x) > r)
    }

    pub fn get(&self, x: &[i64]) -> Result<f64> {
        if let Some(r) = self.range {
            if norm1(x) > r {
                return Ok(0.0);
            }
        }
        self.index(x).map(|i| self.values[i]).ok_or_else(|| Error::Coverage(x.to_vec()))
    }

    pub fn scaled(&self, c: f64) -> Kernel {
        let mut k = self.clone();
        k.values.iter_mut().for_each(|v| *v *= c);
        k.error *= c.abs();
        k
    }

    /// Pointwise sum, on the common table.
    pub fn add(&self, other: &Kernel) -> Kernel {
        let radius = self.radius.min(other.radius);
        let mut k = Kernel::from_fn(self.d, radius, |x| self.get(x).unwrap() + other.get(x).unwrap());
        k.symmetric = self.symmetric && other.symmetric;
        k.range = match (self.range, other.range) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        k.error = self.error + other.error;
        k
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let side = 2 * self.radius + 1;
        let (d, r) = (self.d, self.radius as i64);
        (0..self.values.len()).map(move |mut i| {
            let mut x = vec![0; d];
            for t in (0..d).rev() {
                x[t] = (i % side) as i64 - r;
                i /= side;
            }
            x
        })
    }

    /// CSV-ready rows `(x, K(x))`.
    pub fn rows(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.sites().zip(self.values.iter().copied())
    }

    /// `∂^α K` for a list of signed directions; the table shrinks by one per
    /// derivative.
    pub fn derivative(&self, alpha: &[i32]) -> Result<Kernel> {
        if alpha.len() > MAX_DERIVATIVE_ORDER {
            return Err(Error::UnsupportedOrder(alpha.len()));
        }
        let dirs: Vec<Direction> = alpha.iter().map(|&m| Direction::new(m, self.d)).collect::<Result<_>>()?;
        if alpha.len() > self.radius {
            return Err(Error::Coverage(vec![self.radius as i64 + 1; self.d]));
        }
        let mut k = self.clone();
        for mu in dirs {
            let prev = k.clone();
            let e = mu.unit(self.d);
            k = Kernel::from_fn(self.d, prev.radius - 1, |x| {
                let y: Vec<i64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
                prev.get(&y).unwrap() - prev.get(x).unwrap()
            });
            k.range = prev.range.map(|r| r + 1);
            k.error = 2.0 * prev.error;
        }
        Ok(k)
    }

    /// `(−ΔK)(x)` on the table shrunk by one.
    pub fn neg_laplacian(&self) -> Kernel {
        let d = self.d;
        let mut k = Kernel::from_fn(d, self.radius.saturating_sub(1), |x| {
            let mut acc = 2.0 * d as f64 * self.get(x).unwrap();
            for mu in Direction::all(d) {
                let mut y = x.to_vec();
                y[mu.axis()] += mu.sign();
                acc -= self.get(&y).unwrap();
            }
            acc
        });
        k.range = self.range.map(|r| r + 1);
        k.symmetric = self.symmetric;
        k
    }

    /// `∂^x_μ ∂^y_ν K(x − y)` evaluated at displacement `x − y = r`.
    pub fn grad_grad(&self, r: &[i64], mu: Direction, nu: Direction) -> Result<f64> {
        let mut a = r.to_vec();
        a[mu.axis()] += mu.sign();
        let mut b = a.clone();
        b[nu.axis()] -= nu.sign();
        let mut c = r.to_vec();
        c[nu.axis()] -= nu.sign();
        Ok(self.get(&b)? - self.get(&a)? - self.get(&c)? + self.get(r)?)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn kernel_derivative(k: &Kernel, alpha: &[i32]) -> Result<Kernel> {
    k.derivative(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    /// Smallest `C` with `|∂^αK(x)| ≤ C (1+|x|)^{-(d-2+|α|)}` on the table.
    pub constant: f64,
    /// Least-squares slope of `log|∂^αK|` against `log(1+|x|)`; `-∞` when the
    /// kernel vanishes away from the origin.
    pub exponent: f64,
    pub points: usize,
}

pub fn decay_fit(k: &Kernel, alpha: &[i32], radius: usize) -> Result<DecayFit> {
    let dk = k.derivative(alpha)?;
    if radius > dk.radius {
        return Err(Error::Coverage(vec![radius as i64; k.d]));
    }
    let power = k.d as f64 - 2.0 + alpha.len() as f64;
    let mut constant: f64 = 0.0;
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let floor = 1e-14 * dk.max_abs();
    for (x, v) in dk.rows() {
        if norm_inf(&x) as usize > radius {
            continue;
        }
        let r = 1.0 + norm2(&x);
        constant = constant.max(v.abs() * r.powf(power));
        if x.iter().all(|&c| c == 0) || v.abs() <= floor {
            continue;
        }
        let (lx, ly) = (r.ln(), v.abs().ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        n += 1;
    }
    if constant == 0.0 {
        return Err(Error::DegenerateFit("kernel vanishes on the table".into()));
    }
    let exponent = if n == 0 {
        f64::NEG_INFINITY
    } else {
        let nf = n as f64;
        let den = nf * sxx - sx * sx;
        if den.abs() < 1e-300 {
            return Err(Error::DegenerateFit("all fit points at one radius".into()));
        }
        (nf * sxy - sx * sy) / den
    };
    Ok(DecayFit { constant, exponent, points: n })
}

type TableKey = (usize, usize, u64);

fn coulomb_cache() -> &'static Mutex<HashMap<TableKey, Arc<Kernel>>> {
    static CACHE: OnceLock<Mutex<HashMap<TableKey, Arc<Kernel>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn check_dimension(d: usize) -> Result<()> {
    if d <= 2 {
        return Err(Error::UnsupportedDimension {
            d,
            reason: "the Coulomb integral diverges at p = 0 for d <= 2".into(),
        });
    }
    Ok(())
}

/// The Coulomb kernel tabulated on `[-R, R]^d`, cached per `(d, R, tol)`.
pub fn coulomb_table(d: usize, radius: usize, tol: f64) -> Result<Arc<Kernel>> {
    check_dimension(d)?;
    let key = (d, radius, tol.to_bits());
    if let Some(k) = coulomb_cache().lock().unwrap().get(&key) {
        return Ok(k.clone());
    }
    let cub = integrate_orthant(d, radius, &InverseLaplacian { d }, QuadOptions::with_tol(tol))?;
    let mut k = Kernel::from_orthant(d, radius, &cub.values);
    k.error = cub.error;
    let k = Arc::new(k);
    coulomb_cache().lock().unwrap().insert(key, k.clone());
    Ok(k)
}

/// `C(x) = (2π)^{-d} ∫ e^{ip·x} / λ(p) dp`.
pub fn coulomb(d: usize, x: &[i64], tol: f64) -> Result<f64> {
    check_dimension(d)?;
    if x.len() != d {
        return Err(Error::Invalid(format!("site has {} coordinates, expected {d}", x.len())));
    }
    let cached = {
        let cache = coulomb_cache().lock().unwrap();
        cache
            .iter()
            .find(|((kd, r, t), _)| *kd == d && *t == tol.to_bits() && norm_inf(x) <= *r as i64)
            .map(|(_, k)| k.clone())
    };
    if let Some(k) = cached {
        return k.get(x);
    }
    let mut c: Vec<i64> = x.iter().map(|v| v.abs()).collect();
    c.sort_unstable();
    let cub = integrate_points(d, &[c], &InverseLaplacian { d }, QuadOptions::with_tol(tol))?;
    Ok(cub.values[0])
}
