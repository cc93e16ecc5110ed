//! Sites, directions, fields and the nearest-neighbour stencils.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

pub type Site = Vec<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub d: usize,
    pub l: u64,
    pub n: u32,
}

impl LatticeSpec {
    pub fn new(d: usize, l: u64, n: u32) -> Result<Self> {
        let spec = LatticeSpec { d, l, n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("dimension must be at least 1");
        }
        if self.l < 3 || self.l % 2 == 0 {
            return invalid(format!("L must be odd and at least 3, got {}", self.l));
        }
        if self.l.checked_pow(self.n).is_none() {
            return invalid("L^N overflows");
        }
        Ok(())
    }

    /// The stricter regime in which the contraction estimates are stated.
    pub fn validate_strict_regime(&self) -> Result<()> {
        self.validate()?;
        if self.d < 3 {
            return Err(Error::UnsupportedDimension {
                d: self.d,
                reason: "strict regime needs d >= 3".into(),
            });
        }
        let min_l = (1u64 << (self.d + 3)) + 1;
        if self.l < min_l {
            return invalid(format!("strict regime needs L >= {min_l}, got {}", self.l));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.l.pow(self.n) as usize
    }

    pub fn volume(&self) -> usize {
        self.side().pow(self.d as u32)
    }
}

/// A signed lattice direction `±1..±d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction(i32);

impl Direction {
    pub fn new(mu: i32, d: usize) -> Result<Self> {
        if mu == 0 || mu.unsigned_abs() as usize > d {
            return Err(Error::InvalidDirection { mu, d });
        }
        Ok(Direction(mu))
    }

    pub fn value(self) -> i32 {
        self.0
    }

    /// Zero-based coordinate axis.
    pub fn axis(self) -> usize {
        self.0.unsigned_abs() as usize - 1
    }

    pub fn sign(self) -> i64 {
        self.0.signum() as i64
    }

    pub fn neg(self) -> Self {
        Direction(-self.0)
    }

    pub fn unit(self, d: usize) -> Site {
        let mut e = vec![0; d];
        e[self.axis()] = self.sign();
        e
    }

    /// All `2d` directions, ordered `+1, -1, +2, -2, ...`.
    pub fn all(d: usize) -> Vec<Direction> {
        (1..=d as i32).flat_map(|m| [Direction(m), Direction(-m)]).collect()
    }

    pub fn positive(d: usize) -> Vec<Direction> {
        (1..=d as i32).map(Direction).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    /// Periodic, sites `0..side` in each coordinate.
    Torus,
    /// Centered box, sites `-(side-1)/2 ..= (side-1)/2`; nothing outside.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    d: usize,
    side: usize,
    geometry: Geometry,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(d: usize, side: usize, geometry: Geometry) -> Self {
        Field { d, side, geometry, values: vec![0.0; side.pow(d as u32)] }
    }

    pub fn from_values(d: usize, side: usize, geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != side.pow(d as u32) {
            return invalid(format!(
                "field has {} values, expected {}",
                values.len(),
                side.pow(d as u32)
            ));
        }
        Ok(Field { d, side, geometry, values })
    }

    pub fn from_fn(d: usize, side: usize, geometry: Geometry, f: impl Fn(&[i64]) -> f64) -> Self {
        let mut field = Field::zeros(d, side, geometry);
        for i in 0..field.values.len() {
            let x = field.site_of(i);
            field.values[i] = f(&x);
        }
        field
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn offset(&self) -> i64 {
        match self.geometry {
            Geometry::Torus => 0,
            Geometry::Box => (self.side as i64 - 1) / 2,
        }
    }

    /// Linear index of a site, wrapping on the torus.
    pub fn index(&self, x: &[i64]) -> Result<usize> {
        if x.len() != self.d {
            return invalid(format!("site has {} coordinates, expected {}", x.len(), self.d));
        }
        let side = self.side as i64;
        let off = self.offset();
        let mut idx = 0usize;
        for &c in x {
            let c = match self.geometry {
                Geometry::Torus => c.rem_euclid(side),
                Geometry::Box => {
                    let c = c + off;
                    if c < 0 || c >= side {
                        return Err(Error::Domain(x.to_vec()));
                    }
                    c
                }
            };
            idx = idx * self.side + c as usize;
        }
        Ok(idx)
    }

    pub fn site_of(&self, mut idx: usize) -> Site {
        let mut x = vec![0; self.d];
        for k in (0..self.d).rev() {
            x[k] = (idx % self.side) as i64 - self.offset();
            idx /= self.side;
        }
        x
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.values.len()).map(|i| self.site_of(i))
    }

    pub fn get(&self, x: &[i64]) -> Result<f64> {
        Ok(self.values[self.index(x)?])
    }

    pub fn set(&mut self, x: &[i64], v: f64) -> Result<()> {
        let i = self.index(x)?;
        self.values[i] = v;
        Ok(())
    }

    /// Linear index of `x + e_mu` on the torus, given the linear index of `x`.
    pub(crate) fn torus_shift(&self, idx: usize, mu: Direction) -> usize {
        let axis = mu.axis();
        let stride = self.side.pow((self.d - 1 - axis) as u32);
        let c = (idx / stride) % self.side;
        let nc = (c as i64 + mu.sign()).rem_euclid(self.side as i64) as usize;
        idx + nc * stride - c * stride
    }
}

pub fn shifted(x: &[i64], mu: Direction) -> Site {
    let mut y = x.to_vec();
    y[mu.axis()] += mu.sign();
    y
}

/// `φ(x + e_μ) − φ(x)`.
pub fn derivative(phi: &Field, mu: i32, x: &[i64]) -> Result<f64> {
    let mu = Direction::new(mu, phi.d)?;
    Ok(phi.get(&shifted(x, mu))? - phi.get(x)?)
}

/// `(−Δφ)(x) = 2d φ(x) − Σ_{±μ} φ(x + e_μ)`.
pub fn laplacian(phi: &Field, x: &[i64]) -> Result<f64> {
    let mut acc = 2.0 * phi.d as f64 * phi.get(x)?;
    for mu in Direction::all(phi.d) {
        acc -= phi.get(&shifted(x, mu))?;
    }
    Ok(acc)
}

/// `¼ Σ_{x∈region} Σ_{±μ} (∂_μφ(x))²`.
pub fn quadratic_energy<'a>(phi: &Field, region: impl IntoIterator<Item = &'a Site>) -> Result<f64> {
    let dirs = Direction::all(phi.d);
    let mut acc = 0.0;
    for x in region {
        let v = phi.get(x)?;
        for &mu in &dirs {
            let g = phi.get(&shifted(x, mu))? - v;
            acc += g * g;
        }
    }
    Ok(0.25 * acc)
}

/// Quadratic energy of the whole torus, using precomputed neighbour indices.
pub fn torus_energy(phi: &Field) -> f64 {
    let mut acc = 0.0;
    for i in 0..phi.len() {
        for mu in Direction::positive(phi.d) {
            let g = phi.values[phi.torus_shift(i, mu)] - phi.values[i];
            acc += g * g;
        }
    }
    // each unordered bond appears once here and twice in the signed sum
    0.5 * acc
}

/// Forward gradient `(∂_1φ(x), …, ∂_dφ(x))` at every torus site, flattened.
pub fn torus_gradients(phi: &Field) -> Vec<f64> {
    let d = phi.d;
    let mut out = vec![0.0; phi.len() * d];
    for i in 0..phi.len() {
        for mu in Direction::positive(d) {
            out[i * d + mu.axis()] = phi.values[phi.torus_shift(i, mu)] - phi.values[i];
        }
    }
    out
}

pub fn norm_inf(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).max().unwrap_or(0)
}

pub fn norm1(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).sum()
}

pub fn norm2(x: &[i64]) -> f64 {
    (x.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box1(side: usize, f: impl Fn(&[i64]) -> f64) -> Field {
        Field::from_fn(1, side, Geometry::Box, f)
    }

    #[test]
    fn constant_field_has_zero_derivative() {
        let phi = Field::from_fn(2, 5, Geometry::Torus, |_| 3.5);
        for mu in [1, -1, 2, -2] {
            assert_eq!(derivative(&phi, mu, &[2, 4]).unwrap(), 0.0);
        }
        assert_eq!(laplacian(&phi, &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_field_derivatives() {
        let phi = Field::from_fn(2, 7, Geometry::Box, |x| x[0] as f64);
        assert_eq!(derivative(&phi, 1, &[0, 0]).unwrap(), 1.0);
        assert_eq!(derivative(&phi, -1, &[0, 0]).unwrap(), -1.0);
        assert_eq!(derivative(&phi, 2, &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn bad_direction() {
        let phi = box1(5, |_| 0.0);
        assert_eq!(derivative(&phi, 2, &[0]), Err(Error::InvalidDirection { mu: 2, d: 1 }));
        assert!(derivative(&phi, 0, &[0]).is_err());
    }

    #[test]
    fn box_edge_is_a_domain_error() {
        let phi = box1(5, |_| 0.0);
        assert!(matches!(derivative(&phi, 1, &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn laplacian_of_delta() {
        let phi = box1(5, |x| if x[0] == 0 { 1.0 } else { 0.0 });
        assert_eq!(laplacian(&phi, &[0]).unwrap(), 2.0);
        let phi = Field::from_fn(2, 5, Geometry::Box, |x| if x == [0, 0] { 1.0 } else { 0.0 });
        assert_eq!(laplacian(&phi, &[1, 0]).unwrap(), -1.0);
    }

    #[test]
    fn small_torus_energy() {
        let phi = Field::from_values(1, 4, Geometry::Torus, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let sites: Vec<Site> = phi.sites().collect();
        let v = [0.0, 1.0, 0.0, 0.0];
        let mut oracle = 0.0;
        for x in 0..4 {
            for y in [(x + 1) % 4, (x + 3) % 4] {
                oracle += 0.25 * (v[y] - v[x]) * (v[y] - v[x]);
            }
        }
        // two bonds carry a unit jump, each counted from both ends
        assert_eq!(oracle, 1.0);
        assert_eq!(quadratic_energy(&phi, &sites).unwrap(), oracle);
        assert_eq!(torus_energy(&phi), oracle);
    }

    #[test]
    fn energy_is_homogeneous() {
        let phi = Field::from_fn(2, 4, Geometry::Torus, |x| (x[0] * 3 - x[1]) as f64);
        let mut psi = phi.clone();
        psi.values_mut().iter_mut().for_each(|v| *v *= 3.0);
        let sites: Vec<Site> = phi.sites().collect();
        let a = quadratic_energy(&phi, &sites).unwrap();
        let b = quadratic_energy(&psi, &sites).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn strict_regime() {
        assert!(LatticeSpec::new(3, 65, 2).unwrap().validate_strict_regime().is_ok());
        assert!(LatticeSpec::new(3, 63, 2).unwrap().validate_strict_regime().is_err());
        assert!(LatticeSpec::new(3, 4, 2).is_err());
        assert_eq!(LatticeSpec::new(3, 5, 2).unwrap().volume(), 15625);
    }

    #[test]
    fn negation_is_involution() {
        for mu in Direction::all(4) {
            assert_eq!(mu.neg().neg(), mu);
            assert_eq!(mu.neg().axis(), mu.axis());
        }
    }
}
