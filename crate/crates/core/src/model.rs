//! Model definitions and admissibility conditions.
//!
//! Discrete models carry generators `L̂_α(x, y)` between classical points.
//! Diffusive models carry the coefficient fields `Ĥ, L̂_α, D_Q, D_C, 𝒢, V` of
//! the covariant hybrid master equation
//!
//! ```text
//! dρ̂/dt = −i[Ĥ,ρ̂] + D_Q^{αβ}(L̂_α ρ̂ L̂_β† − ½{L̂_β†L̂_α, ρ̂})
//!         + ½∂_n∂_m(D_C^{nm} ρ̂) + ∂_n(𝒢̄^{nα} L̂_α ρ̂ + h.c.) − ∂_n(V^n ρ̂)
//! ```
//!
//! which is completely positive iff the block matrix `𝒟 = [[D_Q, 𝒢†], [𝒢, D_C]]`
//! is positive semi-definite at every x.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::json;
use crate::linalg::{
    block2, c, cr, fro, hermitian_asymmetry, max_abs, rank_general, to_complex, CMat,
    HermitianEigen, RMat, RVec, C64, I,
};
use crate::state::{Grid, Point, Tolerances};

/// Relative threshold for numerical ranks.
pub const TOL_RANK: f64 = 1e-10;

fn check_hermitian(m: &CMat, what: &str) -> Result<()> {
    let asym = hermitian_asymmetry(m);
    if asym > 1e-10 * max_abs(m).max(1.0) {
        return Err(Error::NonHermitianInput {
            what: what.into(),
            asymmetry: asym,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Discrete models

/// One nonzero block `L̂(to, from)` of a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub to: usize,
    pub from: usize,
    #[serde(with = "json::cmat")]
    pub op: CMat,
}

/// A generator `L̂_α(x, y)` stored sparsely. With `component = Some(k)` its
/// off-diagonal jumps may only change component `k` of vector-valued points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Generator {
    pub entries: Vec<GeneratorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

impl Generator {
    pub fn new(entries: Vec<GeneratorEntry>) -> Self {
        Self {
            entries,
            component: None,
        }
    }

    pub fn entry(to: usize, from: usize, op: CMat) -> GeneratorEntry {
        GeneratorEntry { to, from, op }
    }

    pub fn get(&self, to: usize, from: usize) -> Option<&CMat> {
        self.entries
            .iter()
            .find(|e| e.to == to && e.from == from)
            .map(|e| &e.op)
    }
}

/// Canonical discrete hybrid master equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub points: Vec<Point>,
    pub dim: usize,
    #[serde(with = "json::cmat_vec")]
    pub h: Vec<CMat>,
    pub generators: Vec<Generator>,
}

impl DiscreteModel {
    /// Validates shapes, Hermiticity of Ĥ(x), the component structure, and
    /// linear independence of the generators and of `Î·δ(x, y)`.
    pub fn new(points: Vec<Point>, h: Vec<CMat>, generators: Vec<Generator>) -> Result<Self> {
        let n = points.len();
        if h.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} points but {} Hamiltonians",
                h.len()
            )));
        }
        let dim = h.first().map_or(0, |m| m.nrows());
        for (x, hx) in h.iter().enumerate() {
            if hx.shape() != (dim, dim) {
                return Err(Error::ShapeMismatch(format!("H({x}) must be {dim}x{dim}")));
            }
            check_hermitian(hx, &format!("H at point {x}"))?;
        }
        for (a, g) in generators.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for e in &g.entries {
                if e.to >= n || e.from >= n {
                    return Err(Error::ShapeMismatch(format!(
                        "generator {a} refers to a missing point"
                    )));
                }
                if e.op.shape() != (dim, dim) {
                    return Err(Error::ShapeMismatch(format!(
                        "generator {a} block must be {dim}x{dim}"
                    )));
                }
                if !seen.insert((e.to, e.from)) {
                    return Err(Error::InvalidArgument(format!(
                        "generator {a} has two blocks at ({}, {})",
                        e.to, e.from
                    )));
                }
                if let (Some(k), true) = (g.component, e.to != e.from) {
                    let (p, q) = (&points[e.to].0, &points[e.from].0);
                    let differs: Vec<usize> = (0..p.len().max(q.len()))
                        .filter(|&i| p.get(i) != q.get(i))
                        .collect();
                    if differs != [k] {
                        return Err(Error::InvalidArgument(format!(
                            "generator {a} jumps between {p:?} and {q:?}, which is not a change of component {k} only"
                        )));
                    }
                }
            }
        }
        let model = Self {
            points,
            dim,
            h,
            generators,
        };
        model.check_independence()?;
        Ok(model)
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Gram matrix of `{L̂_α} ∪ {Î·δ}` under `⟨A, B⟩ = Σ_{x,y} tr A(x,y)† B(x,y)`.
    pub fn gram_matrix(&self) -> CMat {
        let a = self.generators.len();
        let mut maps: Vec<HashMap<(usize, usize), &CMat>> = self
            .generators
            .iter()
            .map(|g| g.entries.iter().map(|e| ((e.to, e.from), &e.op)).collect())
            .collect();
        let eye = CMat::identity(self.dim, self.dim);
        maps.push((0..self.n_points()).map(|x| ((x, x), &eye)).collect());
        let mut gram = CMat::zeros(a + 1, a + 1);
        for i in 0..=a {
            for j in i..=a {
                let mut s = C64::new(0.0, 0.0);
                for (k, ai) in &maps[i] {
                    if let Some(bj) = maps[j].get(k) {
                        s += ai
                            .iter()
                            .zip(bj.iter())
                            .map(|(p, q)| p.conj() * q)
                            .sum::<C64>();
                    }
                }
                gram[(i, j)] = s;
                gram[(j, i)] = s.conj();
            }
        }
        gram
    }

    fn check_independence(&self) -> Result<()> {
        let gram = self.gram_matrix();
        let expected = gram.nrows();
        let rank = HermitianEigen::new(&gram).rank(TOL_RANK);
        if rank < expected {
            return Err(Error::DependentGenerators { rank, expected });
        }
        Ok(())
    }

    /// `Γ(x) = Σ_{α,y} L̂_α(y,x)† L̂_α(y,x)`, the loss operator at each point.
    pub fn loss_operators(&self) -> Vec<CMat> {
        let mut gamma = vec![CMat::zeros(self.dim, self.dim); self.n_points()];
        for g in &self.generators {
            for e in &g.entries {
                gamma[e.from] += e.op.adjoint() * &e.op;
            }
        }
        gamma
    }

    /// Diagonal block `L̂_α(x, x)` or zero.
    pub fn diagonal(&self, alpha: usize, x: usize) -> CMat {
        self.generators[alpha]
            .get(x, x)
            .cloned()
            .unwrap_or_else(|| CMat::zeros(self.dim, self.dim))
    }
}

/// `L̂_α(x,x) += ℓ_α(x)`, `Ĥ(x) −= (i/2)(ℓ̄_α L̂_α(x,x) − ℓ_α L̂_α(x,x)†)`.
/// `ell[α][x]`. Leaves the master equation unchanged.
pub fn gauge_shift_discrete(model: &DiscreteModel, ell: &[Vec<C64>]) -> Result<DiscreteModel> {
    if ell.len() != model.generators.len() || ell.iter().any(|l| l.len() != model.n_points()) {
        return Err(Error::ShapeMismatch(
            "shift must have one value per generator and point".into(),
        ));
    }
    if ell
        .iter()
        .flatten()
        .any(|z| !(z.re.is_finite() && z.im.is_finite()))
    {
        return Err(Error::InvalidArgument("shift must be finite".into()));
    }
    let mut out = model.clone();
    let eye = CMat::identity(model.dim, model.dim);
    for (a, la) in ell.iter().enumerate() {
        for (x, &l) in la.iter().enumerate() {
            if l == C64::new(0.0, 0.0) {
                continue;
            }
            let lxx = model.diagonal(a, x);
            out.h[x] -= (&lxx * l.conj() - lxx.adjoint() * l) * (I * 0.5);
            let g = &mut out.generators[a];
            match g.entries.iter_mut().find(|e| e.to == x && e.from == x) {
                Some(e) => e.op += &eye * l,
                None => g.entries.push(Generator::entry(x, x, &eye * l)),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diffusive models

/// Coefficients of a diffusive model evaluated at one classical point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients {
    pub h: CMat,
    pub l: Vec<CMat>,
    pub dq: CMat,
    pub dc: RMat,
    pub g: CMat,
    pub v: RVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveModel {
    pub n_classical: usize,
    pub dim: usize,
    /// Needed when any field is tabulated, and by grid solvers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    pub h: Field<CMat>,
    pub generators: Vec<Field<CMat>>,
    pub dq: Field<CMat>,
    pub dc: Field<RMat>,
    pub g: Field<CMat>,
    pub v: Field<RVec>,
}

impl DiffusiveModel {
    /// Model with constant coefficients.
    pub fn constant(h: CMat, l: Vec<CMat>, dq: CMat, dc: RMat, g: CMat, v: RVec) -> Result<Self> {
        Self::new(
            None,
            Field::Const(h),
            l.into_iter().map(Field::Const).collect(),
            Field::Const(dq),
            Field::Const(dc),
            Field::Const(g),
            Field::Const(v),
        )
    }

    pub fn new(
        grid: Option<Grid>,
        h: Field<CMat>,
        generators: Vec<Field<CMat>>,
        dq: Field<CMat>,
        dc: Field<RMat>,
        g: Field<CMat>,
        v: Field<RVec>,
    ) -> Result<Self> {
        let n = dc.sample().map_or(0, |m| m.nrows());
        let dim = h.sample().map_or(0, |m| m.nrows());
        let model = Self {
            n_classical: n,
            dim,
            grid,
            h,
            generators,
            dq,
            dc,
            g,
            v,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, d, a) = (self.n_classical, self.dim, self.generators.len());
        let grid = self.grid.as_ref();
        if let Some(gr) = grid {
            if gr.ndim() != n {
                return Err(Error::ShapeMismatch(format!(
                    "grid has {} axes, model {n}",
                    gr.ndim()
                )));
            }
        }
        self.h.check("H", (d, d), n, grid)?;
        for (i, l) in self.generators.iter().enumerate() {
            l.check(&format!("generator {i}"), (d, d), n, grid)?;
        }
        self.dq.check("D_Q", (a, a), n, grid)?;
        self.dc.check("D_C", (n, n), n, grid)?;
        self.g.check("G", (n, a), n, grid)?;
        self.v.check("V", (n, 1), n, grid)?;
        Ok(())
    }

    pub fn at_point(&self, x: &[f64]) -> Result<LocalCoefficients> {
        let gr = self.grid.as_ref();
        Ok(LocalCoefficients {
            h: self.h.at_point(x, gr)?,
            l: self
                .generators
                .iter()
                .map(|f| f.at_point(x, gr))
                .collect::<Result<_>>()?,
            dq: self.dq.at_point(x, gr)?,
            dc: self.dc.at_point(x, gr)?,
            g: self.g.at_point(x, gr)?,
            v: self.v.at_point(x, gr)?,
        })
    }

    /// Coefficients at every node of `grid` (which must equal the model grid
    /// when fields are tabulated).
    pub fn tabulate(&self, grid: &Grid) -> Result<Vec<LocalCoefficients>> {
        let tabulated = std::iter::once(&self.h)
            .chain(&self.generators)
            .chain([&self.dq, &self.g])
            .any(|f| matches!(f, Field::Table(_)))
            || matches!(self.dc, Field::Table(_))
            || matches!(self.v, Field::Table(_));
        if tabulated && self.grid.as_ref() != Some(grid) {
            return Err(Error::ShapeMismatch(
                "tabulated model fields live on a different grid".into(),
            ));
        }
        let gr = Some(grid);
        (0..grid.n_nodes())
            .map(|node| {
                Ok(LocalCoefficients {
                    h: self.h.at_node(node, gr)?,
                    l: self
                        .generators
                        .iter()
                        .map(|f| f.at_node(node, gr))
                        .collect::<Result<_>>()?,
                    dq: self.dq.at_node(node, gr)?,
                    dc: self.dc.at_node(node, gr)?,
                    g: self.g.at_node(node, gr)?,
                    v: self.v.at_node(node, gr)?,
                })
            })
            .collect()
    }

    /// Points at which admissibility is checked: every node when a coefficient
    /// varies and a grid is known, otherwise the origin.
    fn sample_points(&self) -> Vec<Vec<f64>> {
        let varies = !(self.dq.is_const() && self.dc.is_const() && self.g.is_const());
        match (&self.grid, varies) {
            (Some(g), true) => (0..g.n_nodes()).map(|i| g.coord(i)).collect(),
            _ => vec![vec![0.0; self.n_classical]],
        }
    }

    /// Validates `𝒟(x)` at every sampled point; the model is admissible only if
    /// all points pass.
    pub fn validate(&self, tol: &Tolerances) -> Result<ModelValidation> {
        let mut out = ModelValidation {
            admissible: true,
            points_checked: 0,
            worst_min_eig: f64::INFINITY,
            worst_point: Vec::new(),
            minimum_noise: true,
            monitoring_ok: true,
            report: None,
        };
        for x in self.sample_points() {
            let loc = self.at_point(&x)?;
            check_hermitian(&loc.h, "H")?;
            let r = validate_block(&loc.dq, &loc.dc, &loc.g, TOL_RANK, tol)?;
            out.points_checked += 1;
            out.admissible &= r.psd_ok;
            out.minimum_noise &= r.minimum_noise;
            out.monitoring_ok &= r.monitoring_ok;
            if r.min_eig < out.worst_min_eig || out.report.is_none() {
                out.worst_min_eig = r.min_eig;
                out.worst_point = x;
                out.report = Some(r);
            }
        }
        Ok(out)
    }
}

/// Admissibility of a diffusive model over all sampled points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelValidation {
    pub admissible: bool,
    pub points_checked: usize,
    pub worst_min_eig: f64,
    pub worst_point: Vec<f64>,
    pub minimum_noise: bool,
    pub monitoring_ok: bool,
    /// Report at the worst point.
    pub report: Option<ValidationReport>,
}

/// Shift `L̂_α → L̂_α + ℓ_α(x)` with the compensating Hamiltonian and drift:
/// `Ĥ −= (i/2)(K − K†)` with `K = D_Q^{αβ} ℓ̄_β L̂_α`, and `V^n += 𝒢̄^{nα}ℓ_α + c.c.`
///
/// Fields stay constant when everything involved is constant; otherwise the
/// result is tabulated on the model grid.
pub fn gauge_shift_diffusive(model: &DiffusiveModel, ell: &[Field<C64>]) -> Result<DiffusiveModel> {
    let a = model.n_generators();
    if ell.len() != a {
        return Err(Error::ShapeMismatch(format!(
            "shift needs {a} components, got {}",
            ell.len()
        )));
    }
    let all_const = ell.iter().all(Field::is_const)
        && model.h.is_const()
        && model.generators.iter().all(Field::is_const)
        && model.dq.is_const()
        && model.g.is_const()
        && model.v.is_const();
    let shift_at = |loc: &LocalCoefficients, l: &[C64]| {
        let eye = CMat::identity(model.dim, model.dim);
        let mut k = CMat::zeros(model.dim, model.dim);
        for al in 0..a {
            for be in 0..a {
                k += &loc.l[al] * (loc.dq[(al, be)] * l[be].conj());
            }
        }
        let h = &loc.h - (&k - k.adjoint()) * (I * 0.5);
        let ls: Vec<CMat> = (0..a).map(|al| &loc.l[al] + &eye * l[al]).collect();
        let mut v = loc.v.clone();
        for n in 0..model.n_classical {
            for al in 0..a {
                v[n] += 2.0 * (loc.g[(n, al)].conj() * l[al]).re;
            }
        }
        (h, ls, v)
    };
    let mut out = model.clone();
    if all_const {
        let loc = model.at_point(&vec![0.0; model.n_classical])?;
        let l: Vec<C64> = ell
            .iter()
            .map(|f| f.at_point(&[], None))
            .collect::<Result<_>>()?;
        let (h, ls, v) = shift_at(&loc, &l);
        out.h = Field::Const(h);
        out.generators = ls.into_iter().map(Field::Const).collect();
        out.v = Field::Const(v);
        return Ok(out);
    }
    let grid = model.grid.clone().ok_or_else(|| {
        Error::InvalidArgument("x-dependent gauge shift needs a model grid".into())
    })?;
    let locs = model.tabulate(&grid)?;
    let mut hs = Vec::new();
    let mut lss = vec![Vec::new(); a];
    let mut vs = Vec::new();
    for (node, loc) in locs.iter().enumerate() {
        let l: Vec<C64> = ell
            .iter()
            .map(|f| f.at_node(node, Some(&grid)))
            .collect::<Result<_>>()?;
        let (h, ls, v) = shift_at(loc, &l);
        hs.push(h);
        for (dst, li) in lss.iter_mut().zip(ls) {
            dst.push(li);
        }
        vs.push(v);
    }
    out.h = Field::Table(hs);
    out.generators = lss.into_iter().map(Field::Table).collect();
    out.v = Field::Table(vs);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Block matrix and admissibility

/// `𝒟 = [[D_Q, 𝒢†], [𝒢, D_C]]` with its cached spectrum.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    pub matrix: CMat,
    pub eigen: HermitianEigen,
}

impl BlockMatrix {
    pub fn new(dq: &CMat, dc: &RMat, g: &CMat) -> Result<Self> {
        check_block_shapes(dq, dc, g)?;
        let matrix = block2(dq, &g.adjoint(), g, &to_complex(dc));
        let eigen = HermitianEigen::new(&matrix);
        Ok(Self { matrix, eigen })
    }

    pub fn min_eig(&self) -> f64 {
        self.eigen.min()
    }

    pub fn is_psd(&self, tol_psd: f64) -> bool {
        self.min_eig() >= -tol_psd
    }
}

fn check_block_shapes(dq: &CMat, dc: &RMat, g: &CMat) -> Result<()> {
    let (a, n) = (dq.nrows(), dc.nrows());
    if !dq.is_square() || !dc.is_square() || g.shape() != (n, a) {
        return Err(Error::ShapeMismatch(format!(
            "need D_Q AxA, D_C NxN, G NxA; got {:?}, {:?}, {:?}",
            dq.shape(),
            dc.shape(),
            g.shape()
        )));
    }
    check_hermitian(dq, "D_Q")?;
    let asym = (dc - dc.transpose()).amax();
    if asym > 1e-10 * dc.amax().max(1.0) {
        return Err(Error::NonHermitianInput {
            what: "D_C".into(),
            asymmetry: asym,
        });
    }
    Ok(())
}

/// Moore–Penrose inverse of a Hermitian PSD matrix; eigenvalues below
/// `tol_rank · max|λ|` count as zero.
pub fn pseudo_inverse(m: &CMat, tol_rank: f64) -> Result<CMat> {
    check_hermitian(m, "pseudo-inverse argument")?;
    Ok(pinv_unchecked(m, tol_rank))
}

fn pinv_unchecked(m: &CMat, tol_rank: f64) -> CMat {
    let e = HermitianEigen::new(m);
    let cut = tol_rank * e.max_abs();
    e.apply(|l| {
        if l.abs() > cut && l != 0.0 {
            1.0 / l
        } else {
            0.0
        }
    })
}

/// Real symmetric variant of [`pseudo_inverse`].
pub fn pseudo_inverse_real(m: &RMat, tol_rank: f64) -> Result<RMat> {
    Ok(pseudo_inverse(&to_complex(m), tol_rank)?.map(|z| z.re))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub psd_ok: bool,
    pub min_eig: f64,
    pub rank_block: usize,
    pub rank_g: usize,
    pub rank_dq: usize,
    pub rank_dc: usize,
    pub tol_rank: f64,
    pub minimum_noise: bool,
    pub monitoring_ok: bool,
    /// `max(0, λ_max(𝒢 D_Q⁺ 𝒢† − D_C))`.
    pub residual_45: f64,
    /// `‖𝒢 D_Q⁺ D_Q 𝒢† − 𝒢𝒢†‖`.
    pub residual_46: f64,
    /// `max(0, λ_max(𝒢† D_C⁺ 𝒢 − D_Q))`.
    pub residual_47: f64,
    /// `‖𝒢† D_C⁺ D_C 𝒢 − 𝒢†𝒢‖`.
    pub residual_48: f64,
    /// `‖D_Q − 𝒢† D_C⁺ 𝒢‖`.
    pub monitoring_residual: f64,
    /// Direct eigenvalue verdict agrees with both generalized-inverse verdicts.
    pub consistent: bool,
}

fn scale_of(dq: &CMat, dc: &RMat, g: &CMat) -> f64 {
    max_abs(dq).max(dc.amax()).max(max_abs(g)).max(1.0)
}

/// Positivity of `𝒟` together with the generalized-inverse (Schur complement)
/// criteria in both directions.
pub fn validate_block(
    dq: &CMat,
    dc: &RMat,
    g: &CMat,
    tol_rank: f64,
    tol: &Tolerances,
) -> Result<ValidationReport> {
    let block = BlockMatrix::new(dq, dc, g)?;
    let dcc = to_complex(dc);
    let scale = scale_of(dq, dc, g);
    let tol_v = 1e-8 * scale * scale;

    let dq_e = HermitianEigen::new(dq);
    let dc_e = HermitianEigen::new(&dcc);
    let dq_p = pinv_unchecked(dq, tol_rank);
    let dc_p = pinv_unchecked(&dcc, tol_rank);
    let gd = g.adjoint();
    let schur_c = g * &dq_p * &gd - &dcc;
    let schur_q = &gd * &dc_p * g - dq;
    let residual_45 = HermitianEigen::new(&schur_c)
        .values
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0);
    let residual_46 = fro(&(g * &dq_p * dq * &gd - g * &gd));
    let residual_47 = HermitianEigen::new(&schur_q)
        .values
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0);
    let residual_48 = fro(&(&gd * &dc_p * &dcc * g - &gd * g));
    let monitoring_residual = fro(&schur_q);

    let min_eig = block.min_eig();
    let psd_ok = min_eig >= -tol.psd * scale;
    let v_q = residual_45 <= tol_v && residual_46 <= tol_v && dq_e.min() >= -tol.psd * scale;
    let v_c = residual_47 <= tol_v && residual_48 <= tol_v && dc_e.min() >= -tol.psd * scale;
    let borderline = min_eig.abs() <= 1e-8 * scale;
    let consistent = borderline || (psd_ok == v_q && psd_ok == v_c);

    let rank_block = block.eigen.rank(tol_rank);
    let rank_g = rank_general(g, tol_rank);
    Ok(ValidationReport {
        psd_ok,
        min_eig,
        rank_block,
        rank_g,
        rank_dq: dq_e.rank(tol_rank),
        rank_dc: dc_e.rank(tol_rank),
        tol_rank,
        minimum_noise: psd_ok && rank_block == rank_g,
        monitoring_ok: psd_ok && monitoring_residual <= tol_v,
        residual_45,
        residual_46,
        residual_47,
        residual_48,
        monitoring_residual,
        consistent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimumNoiseCheck {
    pub ok: bool,
    pub rank_block: usize,
    pub rank_g: usize,
    /// `‖D_C' D_Q' − I‖` on the active r×r corner of the fitted frame, when `ok`.
    pub corner_residual: Option<f64>,
    /// `‖D_C − 𝒢 D_Q⁺ 𝒢†‖`.
    pub saturation_45: f64,
    /// `‖D_Q − 𝒢† D_C⁺ 𝒢‖`.
    pub saturation_47: f64,
}

/// Minimum-noise test `rank 𝒟 = rank 𝒢`, with the inverse relation of the
/// active corners checked in the frame where `𝒢 = [[I_r, 0], [0, 0]]`.
///
/// The frame comes from the SVD `𝒢 = UΣV†`: classical coordinates transform
/// with `A = diag(Σ_r⁻¹, I)U†` and generators with `V`, so that
/// `D_C' = A D_C A†`, `D_Q' = V† D_Q V`.
pub fn check_minimum_noise(
    dq: &CMat,
    dc: &RMat,
    g: &CMat,
    tol_rank: f64,
    tol: &Tolerances,
) -> Result<MinimumNoiseCheck> {
    let report = validate_block(dq, dc, g, tol_rank, tol)?;
    let dcc = to_complex(dc);
    let sat45 = fro(&(&dcc - g * pinv_unchecked(dq, tol_rank) * g.adjoint()));
    let sat47 = fro(&(dq - g.adjoint() * pinv_unchecked(&dcc, tol_rank) * g));
    let ok = report.minimum_noise;
    let mut corner_residual = None;
    let r = report.rank_g;
    if ok && r > 0 {
        let (n, a) = g.shape();
        let svd = g.clone().svd(true, true);
        // nalgebra returns thin factors; sort singular values descending.
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let mut a_mat = CMat::zeros(r, n);
        let mut v_mat = CMat::zeros(a, r);
        for (k, &src) in order.iter().take(r).enumerate() {
            let s = svd.singular_values[src];
            a_mat.set_row(k, &(u.column(src).adjoint() * cr(1.0 / s)));
            v_mat.set_column(k, &vt.row(src).adjoint());
        }
        let dc_r = &a_mat * &dcc * a_mat.adjoint();
        let dq_r = v_mat.adjoint() * dq * &v_mat;
        corner_residual = Some(fro(&(dc_r * dq_r - CMat::identity(r, r))));
    }
    Ok(MinimumNoiseCheck {
        ok,
        rank_block: report.rank_block,
        rank_g: report.rank_g,
        corner_residual,
        saturation_45: sat45,
        saturation_47: sat47,
    })
}

/// Monitoring condition `D_Q = 𝒢† D_C⁺ 𝒢` (with `𝒟 ⪰ 0`). Residual tolerance
/// `tol` is absolute.
pub fn check_monitoring(dq: &CMat, dc: &RMat, g: &CMat, tol: f64) -> Result<bool> {
    let report = validate_block(dq, dc, g, TOL_RANK, &Tolerances::default())?;
    Ok(report.psd_ok && report.monitoring_residual <= tol)
}

/// `D_C = 𝒢 D_Q⁺ 𝒢†` for real `𝒢`, failing when `range 𝒢† ⊄ range D_Q`.
pub fn minimum_noise_dc(dq: &CMat, g: &CMat, tol_rank: f64) -> Result<RMat> {
    let dq_p = pseudo_inverse(dq, tol_rank)?;
    let gd = g.adjoint();
    let scale = max_abs(dq).max(max_abs(g)).max(1.0);
    let range = fro(&(g * &dq_p * dq * &gd - g * &gd));
    if range > 1e-8 * scale * scale {
        return Err(Error::RankDeficiency(format!(
            "backaction is not in the range of D_Q (residual {range:.3e})"
        )));
    }
    let dc = g * dq_p * gd;
    let im = dc.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if im > 1e-10 * scale * scale {
        return Err(Error::RankDeficiency(format!(
            "minimum-noise diffusion would be complex (imaginary part {im:.3e})"
        )));
    }
    let dc = dc.map(|z| z.re);
    Ok((&dc + dc.transpose()) * 0.5)
}

/// Backaction of a canonical coupling, `𝒢^{nα} = −½ ε^{nm} ∂_m h^α` with
/// `ε = [[0, I], [−I, 0]]`. `grad_h[(m, α)] = ∂_m h^α`.
pub fn canonical_backaction(grad_h: &RMat) -> Result<RMat> {
    let n = grad_h.nrows();
    if n % 2 != 0 {
        return Err(Error::OddDimension(n));
    }
    let half = n / 2;
    let mut g = RMat::zeros(n, grad_h.ncols());
    for a in 0..grad_h.ncols() {
        for k in 0..half {
            g[(k, a)] = -0.5 * grad_h[(k + half, a)];
            g[(k + half, a)] = 0.5 * grad_h[(k, a)];
        }
    }
    Ok(g)
}

/// The symplectic matrix `ε = [[0, I], [−I, 0]]`.
pub fn symplectic(n: usize) -> Result<RMat> {
    if n % 2 != 0 {
        return Err(Error::OddDimension(n));
    }
    let h = n / 2;
    let mut e = RMat::zeros(n, n);
    for k in 0..h {
        e[(k, k + h)] = 1.0;
        e[(k + h, k)] = -1.0;
    }
    Ok(e)
}

/// Scalar helper used in tests and presets.
pub fn scalar(v: f64) -> CMat {
    CMat::from_element(1, 1, c(v, 0.0))
}
