//! Blocks, polymers, small sets and the combinatorial constants.

use crate::error::{Error, Result};
use crate::lattice::{norm1, norm2, norm_inf, Site};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Adjacency {
    /// Blocks touch, corners included.
    #[default]
    King,
    /// Blocks share a face.
    Face,
}

impl Adjacency {
    pub fn adjacent(self, a: &[i64], b: &[i64]) -> bool {
        let diff: Vec<i64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        match self {
            Adjacency::King => norm_inf(&diff) == 1,
            Adjacency::Face => norm1(&diff) == 1,
        }
    }

    /// Distance in the norm matching the rule.
    pub fn distance(self, a: &[i64], b: &[i64]) -> i64 {
        let diff: Vec<i64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        match self {
            Adjacency::King => norm_inf(&diff),
            Adjacency::Face => norm1(&diff),
        }
    }
}

impl std::str::FromStr for Adjacency {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "king" | "sup" => Ok(Adjacency::King),
            "face" => Ok(Adjacency::Face),
            _ => Err(Error::Invalid(format!("unknown adjacency {s:?} (expected king or face)"))),
        }
    }
}

/// Neighbour offsets between `j`-blocks, read off from the sites the blocks
/// cover: two blocks are adjacent when some pair of their sites is.
pub fn neighbor_offsets(d: usize, adj: Adjacency, j: u32, l: u64) -> Vec<Vec<i64>> {
    let side = l.pow(j) as i64;
    let half = (side - 1) / 2;
    let mut out = Vec::new();
    let n = 5usize.pow(d as u32);
    for i in 0..n {
        let mut r = i;
        let o: Vec<i64> = (0..d)
            .map(|_| {
                let c = (r % 5) as i64 - 2;
                r /= 5;
                c
            })
            .collect();
        if o.iter().all(|&c| c == 0) {
            continue;
        }
        // gap between the site intervals along each axis
        let gaps: Vec<i64> = o.iter().map(|&c| (c.abs() * side - 2 * half).max(0)).collect();
        let touching = match adj {
            Adjacency::King => gaps.iter().all(|&g| g <= 1),
            Adjacency::Face => gaps.iter().sum::<i64>() <= 1,
        };
        if touching {
            out.push(o);
        }
    }
    out.sort();
    out
}

/// `b_j(x) = ⌊(x + (L^j − 1)/2) / L^j⌋` per coordinate.
pub fn block_of_site(x: &[i64], j: u32, l: u64) -> Site {
    let side = l.pow(j) as i64;
    let half = (side - 1) / 2;
    x.iter().map(|c| (c + half).div_euclid(side)).collect()
}

/// The `(j+1)`-block containing a `j`-block.
pub fn parent(b: &[i64], l: u64) -> Site {
    let half = (l as i64 - 1) / 2;
    b.iter().map(|c| (c + half).div_euclid(l as i64)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block {
    pub j: u32,
    pub b: Site,
}

impl Block {
    pub fn new(j: u32, b: Site) -> Self {
        Block { j, b }
    }

    /// Sites covered, as the inclusive range per coordinate.
    pub fn site_range(&self, l: u64) -> Vec<(i64, i64)> {
        let side = l.pow(self.j) as i64;
        let half = (side - 1) / 2;
        self.b.iter().map(|c| (c * side - half, c * side + half)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Polymer {
    pub j: u32,
    blocks: Vec<Site>,
}

impl Polymer {
    pub fn new(j: u32, blocks: impl IntoIterator<Item = Site>) -> Self {
        let set: BTreeSet<Site> = blocks.into_iter().collect();
        Polymer { j, blocks: set.into_iter().collect() }
    }

    pub fn blocks(&self) -> &[Site] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn contains(&self, b: &[i64]) -> bool {
        self.blocks.binary_search_by(|x| x.as_slice().cmp(b)).is_ok()
    }

    pub fn connected_components(&self, adj: Adjacency) -> Vec<Polymer> {
        let n = self.blocks.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                comp.push(self.blocks[i].clone());
                for k in 0..n {
                    if !seen[k] && adj.adjacent(&self.blocks[i], &self.blocks[k]) {
                        seen[k] = true;
                        stack.push(k);
                    }
                }
            }
            out.push(Polymer::new(self.j, comp));
        }
        out
    }

    pub fn is_connected(&self, adj: Adjacency) -> bool {
        !self.blocks.is_empty() && self.connected_components(adj).len() == 1
    }

    /// Connected and at most `2^d` blocks.
    pub fn is_small(&self, d: usize, adj: Adjacency) -> bool {
        self.len() <= 1 << d && self.is_connected(adj)
    }

    /// The `(j+1)`-blocks meeting `X`.
    pub fn closure(&self, l: u64) -> Polymer {
        Polymer::new(self.j + 1, self.blocks.iter().map(|b| parent(b, l)))
    }

    pub fn union(&self, other: &Polymer) -> Polymer {
        Polymer::new(self.j, self.blocks.iter().chain(other.blocks.iter()).cloned())
    }

    pub fn intersects(&self, other: &Polymer) -> bool {
        self.blocks.iter().any(|b| other.contains(b))
    }

    /// Some block of one equals or touches some block of the other.
    pub fn touches(&self, other: &Polymer, adj: Adjacency) -> bool {
        self.blocks
            .iter()
            .any(|a| other.blocks.iter().any(|b| a == b || adj.adjacent(a, b)))
    }

    pub fn translated(&self, by: &[i64]) -> Polymer {
        Polymer::new(self.j, self.blocks.iter().map(|b| b.iter().zip(by).map(|(x, y)| x + y).collect()))
    }
}

pub fn connected_components(x: &Polymer, adj: Adjacency) -> Vec<Polymer> {
    x.connected_components(adj)
}

pub fn closure(x: &Polymer, l: u64) -> Polymer {
    x.closure(l)
}

/// `B' ∈ star(B)`: some small set contains both.
pub fn in_star(d: usize, adj: Adjacency, b: &[i64], other: &[i64]) -> bool {
    adj.distance(b, other) < (1 << d) as i64
}

/// Whether `star(X)` contains a block.
pub fn star_of_polymer_contains(d: usize, adj: Adjacency, x: &Polymer, b: &[i64]) -> bool {
    x.blocks().iter().any(|c| in_star(d, adj, c, b))
}

/// Fixed animals (connected sets up to translation) by size, anchored at the
/// lexicographically smallest cell.
struct AnimalGrid {
    d: usize,
    side: usize,
    center: usize,
    offsets: Vec<isize>,
    mark: Vec<bool>,
}

impl AnimalGrid {
    fn new(d: usize, offsets: &[Vec<i64>], max: usize) -> Self {
        let reach = offsets.iter().map(|o| norm_inf(o)).max().unwrap_or(1) as usize;
        let half = reach * max + 1;
        let side = 2 * half + 1;
        let size = side.pow(d as u32);
        let stride = |t: usize| side.pow((d - 1 - t) as u32) as isize;
        let lin = |o: &[i64]| o.iter().enumerate().map(|(t, &c)| c as isize * stride(t)).sum::<isize>();
        let center = (0..d).map(|t| half * side.pow((d - 1 - t) as u32)).sum();
        let mut mark = vec![false; size];
        // cells lexicographically below the anchor, and the padding ring
        for (i, m) in mark.iter_mut().enumerate() {
            let mut r = i;
            let mut x = vec![0i64; d];
            for t in (0..d).rev() {
                x[t] = (r % side) as i64 - half as i64;
                r /= side;
            }
            let below = x.iter().find(|&&c| c != 0).is_some_and(|&c| c < 0);
            let edge = x.iter().any(|&c| c.unsigned_abs() as usize >= half);
            *m = below || edge;
        }
        mark[center] = true;
        AnimalGrid { d, side, center, offsets: offsets.iter().map(|o| lin(o)).collect(), mark }
    }

    fn coords(&self, i: usize) -> Site {
        let half = (self.side / 2) as i64;
        let mut r = i;
        let mut x = vec![0i64; self.d];
        for t in (0..self.d).rev() {
            x[t] = (r % self.side) as i64 - half;
            r /= self.side;
        }
        x
    }
}

struct Counter<'a> {
    grid: &'a mut AnimalGrid,
    max: usize,
    counts: Vec<u64>,
    nodes: u64,
    budget: u64,
    keep: Option<Vec<Vec<usize>>>,
    current: Vec<usize>,
}

impl Counter<'_> {
    fn run(&mut self, mut untried: Vec<usize>, size: usize) -> Result<()> {
        while let Some(c) = untried.pop() {
            let s = size + 1;
            self.counts[s - 1] += 1;
            self.nodes += 1;
            if self.nodes > self.budget {
                return Err(Error::BudgetExceeded { partial: self.counts.iter().sum() });
            }
            self.current.push(c);
            if let Some(keep) = self.keep.as_mut() {
                keep.push(self.current.clone());
            }
            if s + 1 == self.max && self.keep.is_none() {
                // every remaining candidate closes one animal of full size
                let fresh = self
                    .grid
                    .offsets
                    .iter()
                    .filter(|&&o| !self.grid.mark[(c as isize + o) as usize])
                    .count();
                self.counts[s] += (untried.len() + fresh) as u64;
            } else if s < self.max {
                let mut added = Vec::new();
                for &o in &self.grid.offsets {
                    let n = (c as isize + o) as usize;
                    if !self.grid.mark[n] {
                        added.push(n);
                    }
                }
                for &n in &added {
                    self.grid.mark[n] = true;
                }
                let mut next = untried.clone();
                next.extend_from_slice(&added);
                let r = self.run(next, s);
                for &n in &added {
                    self.grid.mark[n] = false;
                }
                r?;
            }
            self.current.pop();
        }
        Ok(())
    }
}

/// Number of fixed animals of each size `1..=max` under the given offsets.
pub fn count_animals(d: usize, offsets: &[Vec<i64>], max: usize, budget: u64) -> Result<Vec<u64>> {
    let mut grid = AnimalGrid::new(d, offsets, max);
    let center = grid.center;
    let mut c = Counter { grid: &mut grid, max, counts: vec![0; max], nodes: 0, budget, keep: None, current: vec![] };
    c.run(vec![center], 0)?;
    Ok(c.counts)
}

/// All fixed animals of size `1..=max`, each containing the origin as its
/// lexicographically smallest cell.
pub fn list_animals(d: usize, offsets: &[Vec<i64>], max: usize, budget: u64) -> Result<Vec<Vec<Site>>> {
    let mut grid = AnimalGrid::new(d, offsets, max);
    let center = grid.center;
    let mut c = Counter {
        grid: &mut grid,
        max,
        counts: vec![0; max],
        nodes: 0,
        budget,
        keep: Some(Vec::new()),
        current: vec![],
    };
    c.run(vec![center], 0)?;
    let keep = c.keep.take().unwrap();
    Ok(keep.into_iter().map(|cells| cells.into_iter().map(|i| grid.coords(i)).collect()).collect())
}

pub const DEFAULT_LIST_BUDGET: u64 = 2_000_000;
pub const DEFAULT_COUNT_BUDGET: u64 = 1_000_000_000;

/// Every small set containing `B`, duplicate-free.
pub fn small_sets_containing(b: &Block, d: usize, adj: Adjacency, budget: u64) -> Result<Vec<Polymer>> {
    let offsets = neighbor_offsets(d, adj, 0, 3);
    let animals = list_animals(d, &offsets, 1 << d, budget)?;
    let mut out = BTreeSet::new();
    let mut produced = 0u64;
    for a in &animals {
        for cell in a {
            let shift: Vec<i64> = b.b.iter().zip(cell).map(|(x, c)| x - c).collect();
            out.insert(Polymer::new(b.j, a.clone()).translated(&shift));
            produced += 1;
            if produced > budget {
                return Err(Error::BudgetExceeded { partial: out.len() as u64 });
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Blocks within reach of `B` through a single small set.
pub fn star(b: &Block, d: usize, adj: Adjacency) -> Vec<Site> {
    let r = (1i64 << d) - 1;
    let n = (2 * r + 1) as usize;
    let mut out = Vec::new();
    for i in 0..n.pow(d as u32) {
        let mut k = i;
        let o: Vec<i64> = (0..d)
            .map(|_| {
                let c = (k % n) as i64 - r;
                k /= n;
                c
            })
            .collect();
        let cand: Site = b.b.iter().zip(&o).map(|(x, y)| x + y).collect();
        if in_star(d, adj, &b.b, &cand) {
            out.push(cand);
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NConstants {
    pub d: usize,
    pub adjacency: Adjacency,
    /// Fixed animals of size `s = 1..=2^d`.
    pub counts: Vec<u64>,
    /// `Σ_{X ∋ B} 1/|X|`.
    pub n1: f64,
    /// `Σ_{X ∋ B} 1`.
    pub n2: f64,
}

impl NConstants {
    fn from_counts(d: usize, adjacency: Adjacency, counts: Vec<u64>) -> Self {
        let n1 = counts.iter().map(|&a| a as f64).sum();
        let n2 = counts.iter().enumerate().map(|(i, &a)| (i + 1) as f64 * a as f64).sum();
        NConstants { d, adjacency, counts, n1, n2 }
    }

    /// `Σ_{X ∋ B} l^{−|X|} / |X|`.
    pub fn n3(&self, l: f64) -> f64 {
        self.counts.iter().enumerate().rev().map(|(i, &a)| a as f64 * l.powi(-(i as i32 + 1))).sum()
    }

    /// Number of small sets containing a fixed block with exactly `s` blocks.
    pub fn sets_of_size(&self, s: usize) -> u64 {
        s as u64 * self.counts[s - 1]
    }
}

/// The constants computed with block geometry at scale `j`.
pub fn n_constants_at_scale(d: usize, adj: Adjacency, j: u32, l: u64, budget: u64) -> Result<NConstants> {
    if d == 0 {
        return Err(Error::Invalid("dimension must be at least 1".into()));
    }
    let offsets = neighbor_offsets(d, adj, j, l);
    let counts = count_animals(d, &offsets, 1 << d, budget)?;
    Ok(NConstants::from_counts(d, adj, counts))
}

/// Cached per `(d, adjacency)`.
pub fn n_constants(d: usize, adj: Adjacency) -> Result<Arc<NConstants>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, Adjacency), Arc<NConstants>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(n) = cache.lock().unwrap().get(&(d, adj)) {
        return Ok(n.clone());
    }
    let n = Arc::new(n_constants_at_scale(d, adj, 0, 3, DEFAULT_COUNT_BUDGET)?);
    cache.lock().unwrap().insert((d, adj), n.clone());
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoveringScale {
    pub j0: u32,
    /// Euclidean diameter of the point set.
    pub diam: f64,
    /// `d 2^{d+1} L^{j0}`.
    pub bound: f64,
    pub bound_ok: bool,
    /// A block whose star contains every point at scale `j0`.
    pub center: Site,
}

fn covering_block(d: usize, adj: Adjacency, blocks: &[Site]) -> Option<Site> {
    let reach = (1i64 << d) - 1;
    let lo: Vec<i64> = (0..d).map(|t| blocks.iter().map(|b| b[t]).min().unwrap()).collect();
    let hi: Vec<i64> = (0..d).map(|t| blocks.iter().map(|b| b[t]).max().unwrap()).collect();
    if lo.iter().zip(&hi).any(|(a, b)| b - a > 2 * reach) {
        return None;
    }
    let ext: Vec<i64> = lo.iter().zip(&hi).map(|(a, b)| b - a + 1).collect();
    let total: i64 = ext.iter().product();
    for i in 0..total {
        let mut k = i;
        let cand: Site = (0..d)
            .map(|t| {
                let c = lo[t] + k % ext[t];
                k /= ext[t];
                c
            })
            .collect();
        if blocks.iter().all(|b| in_star(d, adj, &cand, b)) {
            return Some(cand);
        }
    }
    None
}

/// Smallest `j` at which one `j`-block's star holds all points.
pub fn min_covering_scale(points: &[Site], l: u64, adj: Adjacency) -> Result<CoveringScale> {
    let distinct: BTreeSet<&Site> = points.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid("need at least two distinct points".into()));
    }
    let d = points[0].len();
    let mut diam: f64 = 0.0;
    for a in points {
        for b in points {
            let diff: Vec<i64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            diam = diam.max(norm2(&diff));
        }
    }
    for j in 0..40u32 {
        let blocks: Vec<Site> = points.iter().map(|x| block_of_site(x, j, l)).collect();
        if let Some(center) = covering_block(d, adj, &blocks) {
            let bound = d as f64 * (1u64 << (d + 1)) as f64 * (l as f64).powi(j as i32);
            return Ok(CoveringScale { j0: j, diam, bound, bound_ok: diam <= bound, center });
        }
    }
    Err(Error::Invalid("points too far apart".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_examples() {
        let single = Polymer::new(0, vec![vec![0]]);
        assert_eq!(single.connected_components(Adjacency::King), vec![single.clone()]);
        let gap = Polymer::new(0, vec![vec![0], vec![2]]);
        assert_eq!(gap.connected_components(Adjacency::King).len(), 2);
        let corner = Polymer::new(0, vec![vec![0, 0], vec![1, 1]]);
        assert_eq!(corner.connected_components(Adjacency::King).len(), 1);
        assert_eq!(corner.connected_components(Adjacency::Face).len(), 2);
    }

    #[test]
    fn closure_examples() {
        let x = Polymer::new(0, vec![vec![4, -2]]);
        assert_eq!(x.closure(3).len(), 1);
        let straddle = Polymer::new(0, vec![vec![1], vec![2]]);
        assert_eq!(straddle.closure(3).blocks(), &[vec![0], vec![1]]);
        let inside = Polymer::new(0, vec![vec![-1], vec![0], vec![1]]);
        assert_eq!(inside.closure(3).blocks(), &[vec![0]]);
    }

    #[test]
    fn offsets_from_geometry() {
        assert_eq!(neighbor_offsets(2, Adjacency::King, 0, 3).len(), 8);
        assert_eq!(neighbor_offsets(2, Adjacency::Face, 0, 3).len(), 4);
        assert_eq!(neighbor_offsets(3, Adjacency::King, 2, 5).len(), 26);
        assert_eq!(neighbor_offsets(3, Adjacency::Face, 1, 7).len(), 6);
    }

    #[test]
    fn small_sets_in_one_dimension() {
        let sets = small_sets_containing(&Block::new(0, vec![0]), 1, Adjacency::King, DEFAULT_LIST_BUDGET).unwrap();
        let want = vec![
            Polymer::new(0, vec![vec![-1], vec![0]]),
            Polymer::new(0, vec![vec![0]]),
            Polymer::new(0, vec![vec![0], vec![1]]),
        ];
        let got: BTreeSet<_> = sets.into_iter().collect();
        assert_eq!(got, want.into_iter().collect());
    }

    #[test]
    fn one_dimensional_constants() {
        let n = n_constants(1, Adjacency::King).unwrap();
        assert_eq!(n.n1, 2.0);
        assert_eq!(n.n2, 3.0);
        assert_eq!(n.n3(2.0), 0.75);
    }

    #[test]
    fn square_lattice_counts() {
        let king = n_constants(2, Adjacency::King).unwrap();
        assert_eq!(king.counts, vec![1, 4, 20, 110]);
        // fixed polyominoes
        let face = n_constants(2, Adjacency::Face).unwrap();
        assert_eq!(face.counts, vec![1, 2, 6, 19]);
    }

    #[test]
    fn covering_scale_of_neighbours() {
        let c = min_covering_scale(&[vec![0, 0], vec![1, 0]], 3, Adjacency::King).unwrap();
        assert_eq!(c.j0, 0);
        assert!(c.bound_ok);
        assert!(min_covering_scale(&[vec![0], vec![0]], 3, Adjacency::King).is_err());
    }
}
