//! Hybrid densities, quantum states and their diagnostics.
//!
//! A hybrid density assigns an *unnormalized* quantum density matrix ρ̂(x) to
//! every classical configuration x. Its trace is the classical probability
//! (or probability density on a grid) and its normalization the conditional
//! quantum state. Blocks are kept unnormalized because every evolution
//! equation in this crate is linear in ρ̂(x).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::linalg::{cr, hermitian_asymmetry, pauli, trace, CMat, CVec, HermitianEigen};

/// Numerical tolerances shared by states, solvers and validators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed drift of total probability / state norm.
    pub norm: f64,
    /// Allowed negative eigenvalue for a positive semi-definite matrix.
    pub psd: f64,
    /// Below this a classical weight counts as zero.
    pub zero: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            norm: 1e-8,
            psd: 1e-9,
            zero: 1e-12,
        }
    }
}

/// A (possibly unnormalized) density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMat);

impl DensityMatrix {
    pub fn new(m: CMat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "density matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m))
    }

    pub fn from_pure(psi: &CVec) -> Self {
        Self(psi * psi.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }

    pub fn trace(&self) -> f64 {
        trace(&self.0).re
    }

    pub fn purity(&self) -> f64 {
        trace(&(&self.0 * &self.0)).re
    }

    pub fn hermitian_asymmetry(&self) -> f64 {
        hermitian_asymmetry(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        HermitianEigen::new(&self.0).min()
    }

    /// Hermitian to `tol.psd` and no eigenvalue below `-tol.psd`.
    pub fn is_valid(&self, tol: &Tolerances) -> bool {
        self.hermitian_asymmetry() <= tol.psd && self.min_eigenvalue() >= -tol.psd
    }
}

/// Label of a point of a discrete classical space. Vector-valued labels carry
/// one component per classical sub-variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(pub Vec<i64>);

impl Point {
    pub fn scalar(v: i64) -> Self {
        Self(vec![v])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Zero density outside the box.
    Absorbing,
}

/// Regular lattice in N classical dimensions. Node `i` along axis `n` sits at
/// `lower[n] + i * spacing[n]`; nodes are numbered row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: Vec<usize>,
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Grid {
    pub fn new(
        shape: Vec<usize>,
        lower: Vec<f64>,
        spacing: Vec<f64>,
        boundary: Boundary,
    ) -> Result<Self> {
        if shape.len() != lower.len() || shape.len() != spacing.len() {
            return Err(Error::ShapeMismatch(
                "grid shape/lower/spacing lengths differ".into(),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(
                "grid axes need at least one node".into(),
            ));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidArgument(
                "grid spacing must be positive".into(),
            ));
        }
        Ok(Self {
            shape,
            lower,
            spacing,
            boundary,
        })
    }

    /// Periodic grid with `shape[n]` nodes covering `[lower[n], upper[n])`.
    pub fn periodic(shape: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != lower.len() {
            return Err(Error::ShapeMismatch(
                "grid lower/upper lengths differ".into(),
            ));
        }
        let spacing = shape
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(&n, (&lo, &hi))| (hi - lo) / n as f64)
            .collect();
        Self::new(shape, lower, spacing, Boundary::Periodic)
    }

    pub fn periodic_1d(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::periodic(vec![n], vec![lower], vec![upper])
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Period (periodic) or nominal extent of axis `n`.
    pub fn extent(&self, axis: usize) -> f64 {
        self.shape[axis] as f64 * self.spacing[axis]
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.ndim()];
        for axis in (0..self.ndim()).rev() {
            idx[axis] = node % self.shape[axis];
            node /= self.shape[axis];
        }
        idx
    }

    pub fn node_of(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    pub fn coord(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + i as f64 * self.spacing[a])
            .collect()
    }

    /// Neighbor `step` nodes away along `axis`; `None` outside an absorbing box.
    pub fn neighbor(&self, node: usize, axis: usize, step: isize) -> Option<usize> {
        let n = self.shape[axis] as isize;
        let stride = self.stride(axis);
        let i = ((node / stride) % self.shape[axis]) as isize;
        let j = i + step;
        let j = match self.boundary {
            Boundary::Periodic => j.rem_euclid(n),
            Boundary::Absorbing if (0..n).contains(&j) => j,
            Boundary::Absorbing => return None,
        };
        Some((node as isize + (j - i) * stride as isize) as usize)
    }

    /// Trapezoidal quadrature weights (plain cell volumes on periodic grids).
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let vol = self.cell_volume();
        (0..self.n_nodes())
            .map(|node| match self.boundary {
                Boundary::Periodic => vol,
                Boundary::Absorbing => {
                    self.multi_index(node)
                        .iter()
                        .zip(&self.shape)
                        .fold(vol, |w, (&i, &n)| {
                            if n > 1 && (i == 0 || i + 1 == n) {
                                w * 0.5
                            } else {
                                w
                            }
                        })
                }
            })
            .collect()
    }

    /// Map a point back into the fundamental domain of a periodic grid.
    pub fn wrap(&self, x: &mut [f64]) {
        if self.boundary == Boundary::Periodic {
            for (a, xa) in x.iter_mut().enumerate() {
                let len = self.extent(a);
                *xa = self.lower[a] + (*xa - self.lower[a]).rem_euclid(len);
            }
        }
    }

    /// Node whose cell (centered on the node) contains `x`.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut idx = Vec::with_capacity(self.ndim());
        for (a, &xa) in x.iter().enumerate() {
            let n = self.shape[a] as i64;
            let i = ((xa - self.lower[a]) / self.spacing[a] + 0.5).floor() as i64;
            let i = match self.boundary {
                Boundary::Periodic => i.rem_euclid(n),
                Boundary::Absorbing if (0..n).contains(&i) => i,
                Boundary::Absorbing => return None,
            };
            idx.push(i as usize);
        }
        Some(self.node_of(&idx))
    }

    /// Multilinear interpolation stencil `(node, weight)` for an off-grid point.
    /// Outside an absorbing box the point is clamped to the boundary.
    pub fn interpolation_stencil(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut stencil = vec![(Vec::with_capacity(self.ndim()), 1.0)];
        for (a, &xa) in x.iter().enumerate() {
            let n = self.shape[a];
            let u = (xa - self.lower[a]) / self.spacing[a];
            let (i0, i1, frac) = match self.boundary {
                Boundary::Periodic => {
                    let f = u.floor();
                    let i0 = (f as i64).rem_euclid(n as i64) as usize;
                    (i0, (i0 + 1) % n, u - f)
                }
                Boundary::Absorbing => {
                    let uc = u.clamp(0.0, (n - 1) as f64);
                    let i0 = (uc.floor() as usize).min(n.saturating_sub(2));
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, if i1 == i0 { 0.0 } else { uc - i0 as f64 })
                }
            };
            let mut next = Vec::with_capacity(stencil.len() * 2);
            for (idx, w) in stencil {
                if frac < 1.0 {
                    let mut lo = idx.clone();
                    lo.push(i0);
                    next.push((lo, w * (1.0 - frac)));
                }
                if frac > 0.0 {
                    let mut hi = idx;
                    hi.push(i1);
                    next.push((hi, w * frac));
                }
            }
            stencil = next;
        }
        stencil
            .into_iter()
            .map(|(idx, w)| (self.node_of(&idx), w))
            .collect()
    }
}

/// Common read access used by diagnostics that apply to both discrete and
/// grid densities.
pub trait HybridDensity {
    fn blocks(&self) -> &[CMat];
    /// Quadrature weight attached to block `i` (1 for discrete spaces).
    fn weight(&self, i: usize) -> f64;

    fn dim(&self) -> usize {
        self.blocks().first().map_or(0, |b| b.nrows())
    }

    fn total_probability(&self) -> f64 {
        self.blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| self.weight(i) * trace(b).re)
            .sum()
    }

    fn min_block_eigenvalue(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|b| HermitianEigen::new(b).min())
            .fold(f64::INFINITY, f64::min)
    }

    fn max_hermitian_asymmetry(&self) -> f64 {
        self.blocks()
            .iter()
            .map(hermitian_asymmetry)
            .fold(0.0, f64::max)
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(crate::linalg::all_finite)
    }

    /// Checks total probability, Hermiticity and positivity of every block.
    fn check(&self, tol: &Tolerances) -> Result<()> {
        let total = self.total_probability();
        if (total - 1.0).abs() > tol.norm {
            return Err(Error::InvalidArgument(format!(
                "total probability {total} differs from 1"
            )));
        }
        let asym = self.max_hermitian_asymmetry();
        if asym > tol.psd {
            return Err(Error::NonHermitianInput {
                what: "hybrid density block".into(),
                asymmetry: asym,
            });
        }
        let min = self.min_block_eigenvalue();
        if min < -tol.psd {
            return Err(Error::InvalidArgument(format!(
                "block eigenvalue {min:.3e} is negative"
            )));
        }
        Ok(())
    }
}

/// ρ(x) = tr ρ̂(x): a probability vector on discrete spaces, a density field on grids.
///
/// Negative entries beyond `tol.psd` are kept but logged.
pub fn classical_marginal<S: HybridDensity + ?Sized>(state: &S, tol: &Tolerances) -> Vec<f64> {
    let rho: Vec<f64> = state.blocks().iter().map(|b| trace(b).re).collect();
    if let Some(min) = rho.iter().copied().reduce(f64::min) {
        if min < -tol.psd {
            log::warn!("classical marginal has negative entry {min:.3e}");
        }
    }
    rho
}

/// ρ̂_x = ρ̂(x) / tr ρ̂(x).
pub fn conditional_state(block: &CMat, tol: &Tolerances) -> Result<DensityMatrix> {
    let w = trace(block).re;
    if w <= tol.zero {
        return Err(Error::ZeroProbability {
            location: "block".into(),
            weight: w,
        });
    }
    DensityMatrix::new(block * cr(1.0 / w))
}

fn check_block_shapes(blocks: &[CMat]) -> Result<()> {
    if let Some(first) = blocks.first() {
        let d = first.nrows();
        if blocks.iter().any(|b| b.nrows() != d || b.ncols() != d) {
            return Err(Error::ShapeMismatch(
                "all blocks must be square of one dimension".into(),
            ));
        }
    }
    Ok(())
}

/// Hybrid density over a finite set of classical points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridStateDiscrete {
    pub points: Vec<Point>,
    #[serde(with = "json::cmat_vec")]
    pub blocks: Vec<CMat>,
}

impl HybridStateDiscrete {
    pub fn new(points: Vec<Point>, blocks: Vec<CMat>) -> Result<Self> {
        if points.len() != blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} blocks",
                points.len(),
                blocks.len()
            )));
        }
        check_block_shapes(&blocks)?;
        Ok(Self { points, blocks })
    }

    pub fn zeros(points: Vec<Point>, dim: usize) -> Self {
        let blocks = vec![CMat::zeros(dim, dim); points.len()];
        Self { points, blocks }
    }

    /// All weight at point `site` in the pure state ψ.
    pub fn pure(points: Vec<Point>, site: usize, psi: &CVec) -> Self {
        let mut s = Self::zeros(points, psi.len());
        s.blocks[site] = psi * psi.adjoint();
        s
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, p: &Point) -> Option<usize> {
        self.points.iter().position(|q| q == p)
    }

    pub fn conditional_state(&self, site: usize, tol: &Tolerances) -> Result<DensityMatrix> {
        conditional_state(&self.blocks[site], tol).map_err(|e| match e {
            Error::ZeroProbability { weight, .. } => Error::ZeroProbability {
                location: format!("point {:?}", self.points[site].0),
                weight,
            },
            other => other,
        })
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (b, o) in self.blocks.iter_mut().zip(&other.blocks) {
            *b += o * cr(a);
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            points: self.points.clone(),
            blocks: self.blocks.iter().map(|b| b * cr(a)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: Self = serde_json::from_str(s)?;
        Self::new(st.points, st.blocks)
    }
}

impl HybridDensity for HybridStateDiscrete {
    fn blocks(&self) -> &[CMat] {
        &self.blocks
    }
    fn weight(&self, _i: usize) -> f64 {
        1.0
    }
}

/// Hybrid density sampled at the nodes of a regular grid; blocks are densities
/// in x (units of 1/volume).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridStateGrid {
    pub grid: Grid,
    #[serde(with = "json::cmat_vec")]
    pub blocks: Vec<CMat>,
}

impl HybridStateGrid {
    pub fn new(grid: Grid, blocks: Vec<CMat>) -> Result<Self> {
        if grid.n_nodes() != blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} nodes but {} blocks",
                grid.n_nodes(),
                blocks.len()
            )));
        }
        check_block_shapes(&blocks)?;
        Ok(Self { grid, blocks })
    }

    pub fn zeros(grid: Grid, dim: usize) -> Self {
        let blocks = vec![CMat::zeros(dim, dim); grid.n_nodes()];
        Self { grid, blocks }
    }

    /// Build from a closure `x ↦ ρ̂(x)` evaluated at the nodes.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> CMat) -> Result<Self> {
        let blocks = (0..grid.n_nodes()).map(|i| f(&grid.coord(i))).collect();
        Self::new(grid, blocks)
    }

    pub fn conditional_state(&self, node: usize, tol: &Tolerances) -> Result<DensityMatrix> {
        conditional_state(&self.blocks[node], tol).map_err(|e| match e {
            Error::ZeroProbability { weight, .. } => Error::ZeroProbability {
                location: format!("node {node}"),
                weight,
            },
            other => other,
        })
    }

    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (b, o) in self.blocks.iter_mut().zip(&other.blocks) {
            *b += o * cr(a);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: Self = serde_json::from_str(s)?;
        Self::new(st.grid, st.blocks)
    }
}

impl HybridDensity for HybridStateGrid {
    fn blocks(&self) -> &[CMat] {
        &self.blocks
    }
    fn weight(&self, i: usize) -> f64 {
        match self.grid.boundary {
            Boundary::Periodic => self.grid.cell_volume(),
            Boundary::Absorbing => self.grid.quadrature_weights()[i],
        }
    }
    fn total_probability(&self) -> f64 {
        let w = self.grid.quadrature_weights();
        self.blocks
            .iter()
            .zip(&w)
            .map(|(b, w)| w * trace(b).re)
            .sum()
    }
}

/// Either kind of state document, distinguished by its `points` or `grid` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateDocument {
    Discrete(HybridStateDiscrete),
    Grid(HybridStateGrid),
}

/// Smear a point mass at `x0` into a narrow Gaussian (width 3 cells per axis)
/// normalized under the grid quadrature, carrying the quantum state `rho`.
pub fn concentrate(grid: &Grid, x0: &[f64], rho: &DensityMatrix) -> Result<HybridStateGrid> {
    if x0.len() != grid.ndim() {
        return Err(Error::ShapeMismatch(
            "point dimension differs from grid".into(),
        ));
    }
    let profile: Vec<f64> = (0..grid.n_nodes())
        .map(|node| {
            let x = grid.coord(node);
            let mut r2 = 0.0;
            for a in 0..grid.ndim() {
                let mut d = x[a] - x0[a];
                if grid.boundary == Boundary::Periodic {
                    let len = grid.extent(a);
                    d -= len * (d / len).round();
                }
                let w = 3.0 * grid.spacing[a];
                r2 += d * d / (w * w);
            }
            (-0.5 * r2).exp()
        })
        .collect();
    let weights = grid.quadrature_weights();
    let norm: f64 = profile.iter().zip(&weights).map(|(p, w)| p * w).sum();
    let tr = rho.trace();
    if tr <= 0.0 {
        return Err(Error::InvalidArgument(
            "concentrated state needs positive trace".into(),
        ));
    }
    let blocks = profile
        .iter()
        .map(|p| rho.matrix() * cr(p / (norm * tr)))
        .collect();
    HybridStateGrid::new(grid.clone(), blocks)
}

/// Pure or mixed quantum part of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantumState {
    Pure(#[serde(with = "json::cvec")] CVec),
    Mixed(#[serde(with = "json::cmat")] CMat),
}

impl QuantumState {
    pub fn dim(&self) -> usize {
        match self {
            QuantumState::Pure(psi) => psi.len(),
            QuantumState::Mixed(s) => s.nrows(),
        }
    }

    /// ψψ† or σ̂.
    pub fn density(&self) -> CMat {
        match self {
            QuantumState::Pure(psi) => psi * psi.adjoint(),
            QuantumState::Mixed(s) => s.clone(),
        }
    }

    pub fn expect(&self, a: &CMat) -> crate::linalg::C64 {
        match self {
            QuantumState::Pure(psi) => crate::linalg::expect(a, psi),
            QuantumState::Mixed(s) => trace(&(a * s)),
        }
    }

    pub fn purity(&self) -> f64 {
        match self {
            QuantumState::Pure(psi) => psi.norm_squared().powi(2),
            QuantumState::Mixed(s) => trace(&(s * s)).re,
        }
    }

    /// ψ†ψ − 1 or tr σ̂ − 1.
    pub fn norm_defect(&self) -> f64 {
        match self {
            QuantumState::Pure(psi) => psi.norm_squared() - 1.0,
            QuantumState::Mixed(s) => trace(s).re - 1.0,
        }
    }
}

/// Classical part of a trajectory: a site of a discrete space or a point in ℝᴺ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalCoord {
    Site(usize),
    Point(Vec<f64>),
}

/// One sample of an unraveling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub t: f64,
    pub x: ClassicalCoord,
    pub quantum: QuantumState,
}

impl TrajectoryState {
    pub fn pure_at_site(site: usize, psi: CVec) -> Self {
        Self {
            t: 0.0,
            x: ClassicalCoord::Site(site),
            quantum: QuantumState::Pure(psi),
        }
    }

    pub fn pure_at_point(x: Vec<f64>, psi: CVec) -> Self {
        Self {
            t: 0.0,
            x: ClassicalCoord::Point(x),
            quantum: QuantumState::Pure(psi),
        }
    }

    pub fn mixed_at_point(x: Vec<f64>, sigma: CMat) -> Self {
        Self {
            t: 0.0,
            x: ClassicalCoord::Point(x),
            quantum: QuantumState::Mixed(sigma),
        }
    }

    pub fn site(&self) -> Option<usize> {
        match self.x {
            ClassicalCoord::Site(s) => Some(s),
            ClassicalCoord::Point(_) => None,
        }
    }

    pub fn coords(&self) -> Option<&[f64]> {
        match &self.x {
            ClassicalCoord::Point(p) => Some(p),
            ClassicalCoord::Site(_) => None,
        }
    }

    pub fn psi(&self) -> Option<&CVec> {
        match &self.quantum {
            QuantumState::Pure(psi) => Some(psi),
            QuantumState::Mixed(_) => None,
        }
    }

    pub fn sigma(&self) -> Option<&CMat> {
        match &self.quantum {
            QuantumState::Mixed(s) => Some(s),
            QuantumState::Pure(_) => None,
        }
    }

    /// Norm (pure) or trace and positivity (mixed) within tolerance.
    pub fn check(&self, tol: &Tolerances) -> Result<()> {
        let defect = self.quantum.norm_defect();
        if defect.abs() > tol.norm {
            return Err(Error::InvalidArgument(format!(
                "trajectory state norm defect {defect:.3e}"
            )));
        }
        if let QuantumState::Mixed(s) = &self.quantum {
            let min = HermitianEigen::new(s).min();
            if min < -tol.psd {
                return Err(Error::InvalidArgument(format!(
                    "mixed trajectory state has eigenvalue {min:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Weight and Bloch vector of a two-level block, `ρ̂ = ½ w (1 + s·σ̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bloch {
    pub weight: f64,
    pub s: [f64; 3],
}

impl Bloch {
    pub fn length(&self) -> f64 {
        self.s.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_matrix(&self) -> CMat {
        let [s1, s2, s3] = pauli();
        let one = CMat::identity(2, 2);
        (one + s1 * cr(self.s[0]) + s2 * cr(self.s[1]) + s3 * cr(self.s[2])) * cr(0.5 * self.weight)
    }

    /// Positivity of the block is equivalent to |s| ≤ 1.
    pub fn is_positive(&self, tol: f64) -> bool {
        self.length() <= 1.0 + tol
    }
}

/// Decompose a 2×2 block into weight and Bloch vector (σ̂₃ = diag(1, −1)).
pub fn bloch_decompose(rho2: &CMat, tol: &Tolerances) -> Result<Bloch> {
    if rho2.shape() != (2, 2) {
        return Err(Error::ShapeMismatch(format!(
            "Bloch decomposition needs a 2x2 block, got {}x{}",
            rho2.nrows(),
            rho2.ncols()
        )));
    }
    let asym = hermitian_asymmetry(rho2);
    if asym > tol.psd.max(1e-12 * crate::linalg::max_abs(rho2)) {
        return Err(Error::NonHermitianInput {
            what: "two-level block".into(),
            asymmetry: asym,
        });
    }
    let weight = trace(rho2).re;
    if weight <= tol.zero {
        return Err(Error::ZeroProbability {
            location: "two-level block".into(),
            weight,
        });
    }
    let sig = pauli();
    let s = [0, 1, 2].map(|k| trace(&(&sig[k] * rho2)).re / weight);
    Ok(Bloch { weight, s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis, c, max_abs};
    use proptest::prelude::*;

    fn pts(n: i64) -> Vec<Point> {
        (0..n).map(Point::scalar).collect()
    }

    #[test]
    fn marginal_of_scaled_identities() {
        let b = |w: f64| CMat::identity(2, 2) * cr(0.5 * w);
        let s = HybridStateDiscrete::new(pts(2), vec![b(0.3), b(0.7)]).unwrap();
        let m = classical_marginal(&s, &Tolerances::default());
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);
        assert!(s.check(&Tolerances::default()).is_ok());
    }

    #[test]
    fn marginal_of_concentrated_state_is_indicator() {
        let s = HybridStateDiscrete::pure(pts(3), 1, &basis(2, 0));
        let m = classical_marginal(&s, &Tolerances::default());
        assert_eq!(m, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn circle_ansatz_marginal_equals_input_density() {
        let grid = Grid::periodic_1d(64, 0.0, 2.0 * std::f64::consts::PI).unwrap();
        let rho = 1.0 / (2.0 * std::f64::consts::PI);
        let s = HybridStateGrid::from_fn(grid, |x| {
            Bloch {
                weight: rho,
                s: [x[0].cos(), 0.0, x[0].sin()],
            }
            .to_matrix()
        })
        .unwrap();
        let m = classical_marginal(&s, &Tolerances::default());
        assert!(m.iter().all(|v| (v - rho).abs() < 1e-15));
        assert!((s.total_probability() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_state_normalizes() {
        let mut block = CMat::zeros(2, 2);
        block[(1, 1)] = cr(0.3);
        let d = conditional_state(&block, &Tolerances::default()).unwrap();
        assert!((d.matrix()[(1, 1)] - cr(1.0)).norm() < 1e-15);
        assert!(matches!(
            conditional_state(&CMat::zeros(2, 2), &Tolerances::default()),
            Err(Error::ZeroProbability { .. })
        ));
    }

    #[test]
    fn conditional_state_of_unit_bloch_vector_is_projector() {
        let b = Bloch {
            weight: 0.4,
            s: [0.6, 0.0, 0.8],
        };
        let d = conditional_state(&b.to_matrix(), &Tolerances::default()).unwrap();
        // Oracle: eigenvalues of a rank-1 projector are {0, 1}.
        let e = HermitianEigen::new(d.matrix());
        assert!(e.values[0].abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        assert!((d.purity() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bloch_examples() {
        let tol = Tolerances::default();
        let half = CMat::identity(2, 2) * cr(0.5);
        let b = bloch_decompose(&half, &tol).unwrap();
        assert_eq!((b.weight, b.s), (1.0, [0.0, 0.0, 0.0]));

        let up = basis(2, 0) * basis(2, 0).adjoint();
        let b = bloch_decompose(&up, &tol).unwrap();
        assert_eq!(b.s, [0.0, 0.0, 1.0]);

        // ½(1 + 0.6σ₁ + 0.8σ₃)·0.5 written out entry by entry.
        let m = CMat::from_row_slice(2, 2, &[cr(0.45), cr(0.15), cr(0.15), cr(0.05)]);
        let b = bloch_decompose(&m, &tol).unwrap();
        assert!((b.weight - 0.5).abs() < 1e-15);
        assert!(
            (b.s[0] - 0.6).abs() < 1e-15 && b.s[1].abs() < 1e-15 && (b.s[2] - 0.8).abs() < 1e-15
        );
        assert!((b.length() - 1.0).abs() < 1e-15);

        assert!(matches!(
            bloch_decompose(&CMat::zeros(3, 3), &tol),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grid_indexing() {
        let g = Grid::periodic(vec![3, 4], vec![0.0, 0.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(g.n_nodes(), 12);
        for node in 0..12 {
            assert_eq!(g.node_of(&g.multi_index(node)), node);
        }
        let n = g.node_of(&[2, 3]);
        assert_eq!(g.neighbor(n, 0, 1), Some(g.node_of(&[0, 3])));
        assert_eq!(g.neighbor(n, 1, 1), Some(g.node_of(&[2, 0])));
        assert_eq!(g.neighbor(n, 1, -2), Some(g.node_of(&[2, 1])));
        let mut x = [-0.5, 9.25];
        g.wrap(&mut x);
        assert!((x[0] - 2.5).abs() < 1e-15 && (x[1] - 1.25).abs() < 1e-15);
        assert_eq!(g.nearest_node(&[2.6, 0.4]), Some(g.node_of(&[0, 0])));
        let st = g.interpolation_stencil(&[0.25, 3.5]);
        let total: f64 = st.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(st.len(), 4);
    }

    #[test]
    fn concentrate_is_normalized() {
        let g = Grid::periodic_1d(100, -5.0, 5.0).unwrap();
        let rho = DensityMatrix::from_pure(&basis(2, 1));
        let s = concentrate(&g, &[4.9], &rho).unwrap();
        assert!((s.total_probability() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let blocks = vec![
            CMat::from_row_slice(
                2,
                2,
                &[
                    c(0.1, 0.0),
                    c(1.0 / 3.0, -2.0e-17),
                    c(1.0 / 3.0, 2.0e-17),
                    c(std::f64::consts::PI, 0.0),
                ],
            ),
            CMat::identity(2, 2) * c(1e-300, 0.0),
        ];
        let s =
            HybridStateDiscrete::new(vec![Point(vec![0, 1]), Point(vec![1, -1])], blocks).unwrap();
        let back = HybridStateDiscrete::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let doc: StateDocument = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert!(matches!(doc, StateDocument::Discrete(_)));

        let g = Grid::periodic_1d(3, 0.0, 1.0).unwrap();
        let gs = HybridStateGrid::new(g, vec![CMat::identity(1, 1) * c(0.1, 0.7); 3]).unwrap();
        let text = gs.to_json().unwrap();
        assert_eq!(HybridStateGrid::from_json(&text).unwrap(), gs);
        assert!(matches!(
            serde_json::from_str::<StateDocument>(&text).unwrap(),
            StateDocument::Grid(_)
        ));
    }

    proptest! {
        #[test]
        fn bloch_round_trip(w in 1e-3f64..10.0, s1 in -1.0f64..1.0, s2 in -1.0f64..1.0, s3 in -1.0f64..1.0) {
            let b = Bloch { weight: w, s: [s1, s2, s3] };
            let m = b.to_matrix();
            let back = bloch_decompose(&m, &Tolerances::default()).unwrap().to_matrix();
            prop_assert!(max_abs(&(back - m)) <= 1e-12 * w.max(1.0));
        }

        #[test]
        fn marginal_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rnd = || {
                let blocks = (0..3)
                    .map(|_| CMat::from_fn(2, 2, |_, _| c(rng.random::<f64>(), rng.random::<f64>())))
                    .collect();
                HybridStateDiscrete::new(pts(3), blocks).unwrap()
            };
            let (s1, s2) = (rnd(), rnd());
            let mut comb = s1.scaled(a);
            comb.axpy(b, &s2);
            let tol = Tolerances::default();
            let lhs = classical_marginal(&comb, &tol);
            let m1 = classical_marginal(&s1, &tol);
            let m2 = classical_marginal(&s2, &tol);
            for i in 0..3 {
                prop_assert!((lhs[i] - (a * m1[i] + b * m2[i])).abs() < 1e-12);
            }
        }
    }
}
