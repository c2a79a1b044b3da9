//! Grid solver for the diffusive hybrid master equation, the classical
//! Fokker–Planck marginal, and the finite-ε discrete models whose limit it is.
//!
//! Derivatives use second-order central differences; mixed second derivatives
//! the 4-point stencil `(f₊₊ + f₋₋ − f₊₋ − f₋₊)/(4h_n h_m)`. Under absorbing
//! boundaries values outside the box are zero.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::{integrate_blocks, Sampled, Scheme};
use crate::linalg::{cr, trace, CMat, HermitianEigen, C64};
use crate::model::{DiffusiveModel, DiscreteModel, Generator, LocalCoefficients, TOL_RANK};
use crate::state::{Grid, HybridStateGrid, Point, Tolerances};

/// Coefficients tabulated on the grid, plus the local GKLS generator
/// `K = −iĤ − ½ D_Q^{αβ} L̂_β†L̂_α` at every node.
#[derive(Debug, Clone)]
pub struct DiffusiveWorkspace {
    pub grid: Grid,
    pub local: Vec<LocalCoefficients>,
    k: Vec<CMat>,
    /// Ḡ^{nα} L̂_α per node and axis.
    back: Vec<Vec<CMat>>,
    dim: usize,
}

const PAR_THRESHOLD: usize = 64;

impl DiffusiveWorkspace {
    pub fn new(grid: &Grid, model: &DiffusiveModel) -> Result<Self> {
        if grid.ndim() != model.n_classical {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} axes, model {}",
                grid.ndim(),
                model.n_classical
            )));
        }
        for (axis, &len) in grid.shape.iter().enumerate() {
            if len < 3 {
                return Err(Error::BoundaryUnderflow { axis, len });
            }
        }
        let local = model.tabulate(grid)?;
        let a = model.n_generators();
        let mut k = Vec::with_capacity(local.len());
        let mut back = Vec::with_capacity(local.len());
        for loc in &local {
            let mut kk = &loc.h * C64::new(0.0, -1.0);
            for al in 0..a {
                for be in 0..a {
                    let d = loc.dq[(al, be)];
                    if d != C64::new(0.0, 0.0) {
                        kk -= loc.l[be].adjoint() * &loc.l[al] * (d * 0.5);
                    }
                }
            }
            k.push(kk);
            back.push(
                (0..model.n_classical)
                    .map(|n| {
                        let mut b = CMat::zeros(model.dim, model.dim);
                        for al in 0..a {
                            b += &loc.l[al] * loc.g[(n, al)].conj();
                        }
                        b
                    })
                    .collect(),
            );
        }
        Ok(Self {
            grid: grid.clone(),
            local,
            k,
            back,
            dim: model.dim,
        })
    }

    fn neighbor_value<'a>(
        &self,
        f: &'a [CMat],
        node: usize,
        steps: &[(usize, isize)],
    ) -> Option<&'a CMat> {
        let mut cur = node;
        for &(axis, s) in steps {
            cur = self.grid.neighbor(cur, axis, s)?;
        }
        Some(&f[cur])
    }

    /// Writes the right-hand side for `blocks` into `out`.
    pub fn rhs(&self, blocks: &[CMat], out: &mut [CMat]) {
        let nd = self.grid.ndim();
        let n_nodes = blocks.len();
        let a = self.local.first().map_or(0, |l| l.l.len());
        // Fluxes J^n = Ḡ^{nα}L̂_αρ̂ + h.c. − V^nρ̂ and diffusion fields D_C^{nm}ρ̂.
        let flux: Vec<Vec<CMat>> = (0..nd)
            .map(|n| {
                (0..n_nodes)
                    .map(|x| {
                        let br = &self.back[x][n] * &blocks[x];
                        br.adjoint() + br - &blocks[x] * cr(self.local[x].v[n])
                    })
                    .collect()
            })
            .collect();
        let mut diff: Vec<Vec<Option<Vec<CMat>>>> = vec![vec![None; nd]; nd];
        for n in 0..nd {
            for m in n..nd {
                if self.local.iter().any(|l| l.dc[(n, m)] != 0.0) {
                    diff[n][m] = Some(
                        (0..n_nodes)
                            .map(|x| &blocks[x] * cr(self.local[x].dc[(n, m)]))
                            .collect(),
                    );
                }
            }
        }
        let zero = CMat::zeros(self.dim, self.dim);
        let node_rhs = |(x, o): (usize, &mut CMat)| {
            let loc = &self.local[x];
            let kr = &self.k[x] * &blocks[x];
            o.copy_from(&kr);
            *o += kr.adjoint();
            for al in 0..a {
                let lr = &loc.l[al] * &blocks[x];
                for be in 0..a {
                    let d = loc.dq[(al, be)];
                    if d != C64::new(0.0, 0.0) {
                        *o += &lr * loc.l[be].adjoint() * d;
                    }
                }
            }
            for n in 0..nd {
                let h = self.grid.spacing[n];
                let fp = self.neighbor_value(&flux[n], x, &[(n, 1)]).unwrap_or(&zero);
                let fm = self
                    .neighbor_value(&flux[n], x, &[(n, -1)])
                    .unwrap_or(&zero);
                *o += (fp - fm) * cr(1.0 / (2.0 * h));
                for m in n..nd {
                    let Some(f) = &diff[n][m] else { continue };
                    if m == n {
                        let fp = self.neighbor_value(f, x, &[(n, 1)]).unwrap_or(&zero);
                        let fm = self.neighbor_value(f, x, &[(n, -1)]).unwrap_or(&zero);
                        *o += (fp + fm - &f[x] * cr(2.0)) * cr(0.5 / (h * h));
                    } else {
                        let hm = self.grid.spacing[m];
                        let v = |s: isize, t: isize| {
                            self.neighbor_value(f, x, &[(n, s), (m, t)])
                                .unwrap_or(&zero)
                        };
                        let cross =
                            (v(1, 1) + v(-1, -1) - v(1, -1) - v(-1, 1)) * cr(1.0 / (4.0 * h * hm));
                        // ½(∂_n∂_m + ∂_m∂_n) of the symmetric pair.
                        *o += cross;
                    }
                }
            }
        };
        if n_nodes >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(node_rhs);
        } else {
            out.iter_mut().enumerate().for_each(node_rhs);
        }
    }

    /// Largest spectral norm of `D_C` over the grid.
    pub fn max_dc_norm(&self) -> f64 {
        self.local
            .iter()
            .map(|l| {
                let e = HermitianEigen::new(&l.dc.map(cr));
                e.max_abs()
            })
            .fold(0.0, f64::max)
    }

    /// `dt ≤ c·min(h²)/max‖D_C‖` (infinite when there is no diffusion).
    pub fn cfl_bound(&self, c: f64) -> f64 {
        let hmin = self
            .grid
            .spacing
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let d = self.max_dc_norm();
        if d == 0.0 {
            f64::INFINITY
        } else {
            c * hmin * hmin / d
        }
    }
}

fn check_state(state: &HybridStateGrid, model: &DiffusiveModel) -> Result<()> {
    if state
        .blocks
        .iter()
        .any(|b| b.shape() != (model.dim, model.dim))
    {
        return Err(Error::ShapeMismatch(format!(
            "blocks must be {0}x{0}",
            model.dim
        )));
    }
    Ok(())
}

/// Time derivative of the grid state.
pub fn diffusive_rhs(state: &HybridStateGrid, model: &DiffusiveModel) -> Result<Vec<CMat>> {
    check_state(state, model)?;
    let ws = DiffusiveWorkspace::new(&state.grid, model)?;
    let mut out = vec![CMat::zeros(model.dim, model.dim); state.blocks.len()];
    ws.rhs(&state.blocks, &mut out);
    Ok(out)
}

/// Classical marginal equation
/// `dρ/dt = ½∂_n∂_m(D_C^{nm}ρ) − ∂_n(V^nρ − 2Re 𝒢̄^{nα}⟨L̂_α⟩ρ)`
/// with `⟨L̂_α⟩ρ = tr L̂_αρ̂`; where `tr ρ̂ ≤ tol.zero` the backaction term is
/// taken as zero.
pub fn fokker_planck_rhs(
    state: &HybridStateGrid,
    model: &DiffusiveModel,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    check_state(state, model)?;
    let ws = DiffusiveWorkspace::new(&state.grid, model)?;
    let grid = &state.grid;
    let nd = grid.ndim();
    let nn = state.blocks.len();
    let rho: Vec<f64> = state.blocks.iter().map(|b| trace(b).re).collect();
    let flux: Vec<Vec<f64>> = (0..nd)
        .map(|n| {
            (0..nn)
                .map(|x| {
                    let back = if rho[x] > tol.zero {
                        2.0 * trace(&(&ws.back[x][n] * &state.blocks[x])).re
                    } else {
                        0.0
                    };
                    back - ws.local[x].v[n] * rho[x]
                })
                .collect()
        })
        .collect();
    let val = |f: &[f64], x: usize, steps: &[(usize, isize)]| {
        let mut cur = x;
        for &(a, s) in steps {
            match grid.neighbor(cur, a, s) {
                Some(c) => cur = c,
                None => return 0.0,
            }
        }
        f[cur]
    };
    let mut out = vec![0.0; nn];
    for n in 0..nd {
        let h = grid.spacing[n];
        for (x, o) in out.iter_mut().enumerate() {
            *o += (val(&flux[n], x, &[(n, 1)]) - val(&flux[n], x, &[(n, -1)])) / (2.0 * h);
        }
        for m in n..nd {
            let f: Vec<f64> = (0..nn).map(|x| ws.local[x].dc[(n, m)] * rho[x]).collect();
            for (x, o) in out.iter_mut().enumerate() {
                if m == n {
                    *o += 0.5 * (val(&f, x, &[(n, 1)]) + val(&f, x, &[(n, -1)]) - 2.0 * f[x])
                        / (h * h);
                } else {
                    let hm = grid.spacing[m];
                    *o += (val(&f, x, &[(n, 1), (m, 1)]) + val(&f, x, &[(n, -1), (m, -1)])
                        - val(&f, x, &[(n, 1), (m, -1)])
                        - val(&f, x, &[(n, -1), (m, 1)]))
                        / (4.0 * h * hm);
                }
            }
        }
    }
    Ok(out)
}

/// RK4 (or Euler) integration of the grid equation. Fails with `CflViolation`
/// when `dt > cfl · min h² / max‖D_C‖`.
pub fn integrate_grid(
    state: &HybridStateGrid,
    model: &DiffusiveModel,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    sample_every: usize,
    cfl: f64,
) -> Result<Sampled<HybridStateGrid>> {
    check_state(state, model)?;
    let ws = DiffusiveWorkspace::new(&state.grid, model)?;
    let bound = ws.cfl_bound(cfl);
    if dt > bound {
        return Err(Error::CflViolation { dt, bound });
    }
    let grid = state.grid.clone();
    integrate_blocks(
        state.blocks.clone(),
        t_end,
        dt,
        scheme,
        sample_every,
        |y, out| {
            ws.rhs(y, out);
            Ok(())
        },
        |y| HybridStateGrid {
            grid: grid.clone(),
            blocks: y.to_vec(),
        },
    )
}

/// Options for [`build_epsilon_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonOptions {
    /// Represent the drift V by first-order upwind hops of rate |V|/ε.
    pub include_drift: bool,
}

impl Default for EpsilonOptions {
    fn default() -> Self {
        Self {
            include_drift: true,
        }
    }
}

/// Finite-ε discrete model on the nodes of `lattice` (spacing ε_n per axis)
/// whose master equation tends to the diffusive one as ε → 0.
///
/// Along each axis n every node y hops to `y ± ε e_n` through the hybrid
/// generators `(L̂_α(y)/√2, ±Î/(√2ε))` (the classical component is `+` for a
/// hop to `y − εe_n`) with coefficient matrix
/// `[[D_n, 𝒈_n†], [𝒈_n, D_C^{nn}]]`, `𝒈_n` the n-th row of 𝒢 and
/// `D_n = 𝒈_n†𝒈_n/D_C^{nn} + (D_Q − 𝒢†D_C⁻¹𝒢)/N`, so that `Σ_n D_n = D_Q`.
/// For N = 1 this is exactly the construction with `D_n = D_Q`. For N ≥ 2 the
/// diffusion matrix must be diagonal. Generators are the eigen-combinations
/// `√λ_k Σ_i u_k^i J_i` of the coefficient matrix at each source node.
pub fn build_epsilon_model(
    model: &DiffusiveModel,
    lattice: &Grid,
    opts: EpsilonOptions,
) -> Result<DiscreteModel> {
    let nd = model.n_classical;
    if lattice.ndim() != nd {
        return Err(Error::ShapeMismatch(
            "lattice dimension differs from the model".into(),
        ));
    }
    let gvar = model.g.variation(Some(lattice))?;
    let gscale = model
        .g
        .sample()
        .map_or(1.0, |g| crate::linalg::max_abs(g).max(1.0));
    if gvar > 1e-12 * gscale {
        return Err(Error::UnsupportedXDependence(gvar));
    }
    let local = model.tabulate(lattice)?;
    let a = model.n_generators();
    let d = model.dim;
    if nd >= 2 {
        for loc in &local {
            for n in 0..nd {
                for m in 0..nd {
                    if n != m && loc.dc[(n, m)].abs() > 1e-14 {
                        return Err(Error::InvalidArgument(
                            "the epsilon construction needs a diagonal D_C in two or more dimensions".into(),
                        ));
                    }
                }
            }
        }
    }
    let nodes = lattice.n_nodes();
    let points: Vec<Point> = (0..nodes)
        .map(|i| Point(lattice.multi_index(i).iter().map(|&k| k as i64).collect()))
        .collect();
    let h: Vec<CMat> = local.iter().map(|l| l.h.clone()).collect();
    let eye = CMat::identity(d, d);
    let s2 = std::f64::consts::FRAC_1_SQRT_2;

    let mut generators = Vec::new();
    for n in 0..nd {
        let eps = lattice.spacing[n];
        // Per source node: eigenpairs of the (A+1)×(A+1) coefficient matrix.
        let mut per_node = Vec::with_capacity(nodes);
        for loc in &local {
            let dcp = crate::model::pseudo_inverse_real(&loc.dc, TOL_RANK)?;
            let gdg = loc.g.adjoint() * dcp.map(cr) * &loc.g;
            let gn = loc.g.row(n).into_owned();
            let dnn = loc.dc[(n, n)];
            let mut dn = (&loc.dq - &gdg) * cr(1.0 / nd as f64);
            if dnn > 0.0 {
                dn += gn.adjoint() * &gn * cr(1.0 / dnn);
            }
            let mut coef = CMat::zeros(a + 1, a + 1);
            coef.view_mut((0, 0), (a, a)).copy_from(&dn);
            coef.view_mut((0, a), (a, 1)).copy_from(&gn.adjoint());
            coef.view_mut((a, 0), (1, a)).copy_from(&gn);
            coef[(a, a)] = cr(dnn);
            per_node.push(HermitianEigen::new(&coef));
        }
        for k in 0..=a {
            let mut entries = Vec::new();
            for (y, eig) in per_node.iter().enumerate() {
                let lam = eig.values[k];
                if lam <= TOL_RANK * eig.max_abs() {
                    if lam < -1e-9 * eig.max_abs().max(1.0) {
                        log::warn!(
                            "epsilon model: negative coefficient eigenvalue {lam:.3e} at node {y}"
                        );
                    }
                    continue;
                }
                let u = eig.vectors.column(k);
                let mut quantum = CMat::zeros(d, d);
                for al in 0..a {
                    quantum += &local[y].l[al] * (u[al] * s2);
                }
                let classical = u[a] * (s2 / eps);
                for (step, sign) in [(-1isize, 1.0), (1, -1.0)] {
                    if let Some(x) = lattice.neighbor(y, n, step) {
                        let op = (&quantum + &eye * (classical * sign)) * cr(lam.sqrt());
                        entries.push(Generator::entry(x, y, op));
                    }
                }
            }
            if !entries.is_empty() {
                generators.push(Generator::new(entries));
            }
        }
        if opts.include_drift {
            for (dir, step) in [(1.0, 1isize), (-1.0, -1)] {
                let mut entries = Vec::new();
                for (y, loc) in local.iter().enumerate() {
                    let v = dir * loc.v[n];
                    if v > 0.0 {
                        if let Some(x) = lattice.neighbor(y, n, step) {
                            entries.push(Generator::entry(x, y, &eye * cr((v / eps).sqrt())));
                        }
                    }
                }
                if !entries.is_empty() {
                    generators.push(Generator::new(entries));
                }
            }
        }
    }
    DiscreteModel::new(points, h, generators)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete_hme::hme_rhs;
    use crate::field::Field;
    use crate::linalg::{hermitian_asymmetry, max_abs, pauli, RMat, RVec};
    use crate::model::scalar;
    use crate::state::{Bloch, Boundary, HybridDensity, HybridStateDiscrete};
    use std::f64::consts::PI;

    fn two_level(g: f64) -> DiffusiveModel {
        let [_, _, s3] = pauli();
        DiffusiveModel::constant(
            CMat::zeros(2, 2),
            vec![s3],
            scalar(1.0),
            RMat::from_element(1, 1, 1.0),
            scalar(g),
            RVec::zeros(1),
        )
        .unwrap()
    }

    fn smooth_state(grid: &Grid) -> HybridStateGrid {
        HybridStateGrid::from_fn(grid.clone(), |x| {
            Bloch {
                weight: (1.0 + 0.5 * x[0].sin()) / (2.0 * PI),
                s: [0.6 * x[0].cos(), 0.3 * (2.0 * x[0]).sin(), 0.5 * x[0].sin()],
            }
            .to_matrix()
        })
        .unwrap()
    }

    #[test]
    fn two_level_rhs_matches_closed_form() {
        // σ₃ρ̂σ₃ − ρ̂ + G{σ₃, ρ̂′} + ½ρ̂″ with analytic derivatives of the state.
        let grid = Grid::periodic_1d(256, 0.0, 2.0 * PI).unwrap();
        let g = 0.7;
        let st = smooth_state(&grid);
        let rhs = diffusive_rhs(&st, &two_level(g)).unwrap();
        let [_, _, s3] = pauli();
        let mut worst = 0.0f64;
        let mk = |w: f64, s: [f64; 3]| Bloch { weight: w, s }.to_matrix();
        for node in 0..grid.n_nodes() {
            let x = grid.coord(node)[0];
            // ρ̂ = ½(w + w s·σ); differentiate the components w, ws₁, ws₂, ws₃.
            let comps = |x: f64| {
                let w = (1.0 + 0.5 * x.sin()) / (2.0 * PI);
                [
                    w,
                    w * 0.6 * x.cos(),
                    w * 0.3 * (2.0 * x).sin(),
                    w * 0.5 * x.sin(),
                ]
            };
            let dd = |f: &dyn Fn(f64) -> [f64; 4], k: usize| {
                let e = 1e-4;
                (
                    (f(x + e)[k] - f(x - e)[k]) / (2.0 * e),
                    (f(x + e)[k] - 2.0 * f(x)[k] + f(x - e)[k]) / (e * e),
                )
            };
            let from_comps = |v: [f64; 4]| {
                mk(1.0, [0.0; 3]) * cr(v[0])
                    + (mk(1.0, [1.0, 0.0, 0.0]) - mk(1.0, [0.0; 3])) * cr(v[1])
                    + (mk(1.0, [0.0, 1.0, 0.0]) - mk(1.0, [0.0; 3])) * cr(v[2])
                    + (mk(1.0, [0.0, 0.0, 1.0]) - mk(1.0, [0.0; 3])) * cr(v[3])
            };
            let d1 = from_comps([0, 1, 2, 3].map(|k| dd(&comps, k).0));
            let d2 = from_comps([0, 1, 2, 3].map(|k| dd(&comps, k).1));
            let rho = &st.blocks[node];
            let expected = &s3 * rho * &s3 - rho + (&s3 * &d1 + &d1 * &s3) * cr(g) + d2 * cr(0.5);
            worst = worst.max(max_abs(&(&rhs[node] - expected)));
        }
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn no_backaction_and_flat_state_is_local_gkls() {
        let grid = Grid::periodic_1d(16, 0.0, 1.0).unwrap();
        let rho = Bloch {
            weight: 1.0,
            s: [0.3, 0.2, 0.1],
        }
        .to_matrix();
        let st = HybridStateGrid::from_fn(grid, |_| rho.clone()).unwrap();
        let rhs = diffusive_rhs(&st, &two_level(0.0)).unwrap();
        let [_, _, s3] = pauli();
        let gkls = &s3 * &rho * &s3 - &rho;
        assert!(rhs.iter().all(|r| max_abs(&(r - &gkls)) < 1e-12));
    }

    #[test]
    fn trace_and_hermiticity_and_fokker_planck() {
        let grid = Grid::periodic_1d(64, 0.0, 2.0 * PI).unwrap();
        let st = smooth_state(&grid);
        let mut m = two_level(0.9);
        m.v = Field::Const(RVec::from_vec(vec![0.4]));
        m.h = Field::Const(pauli()[0].clone());
        let rhs = diffusive_rhs(&st, &m).unwrap();
        let tot: f64 = rhs.iter().map(|b| trace(b).re).sum::<f64>() * grid.cell_volume();
        assert!(tot.abs() < 1e-12);
        assert!(rhs.iter().all(|b| hermitian_asymmetry(b) < 1e-12));
        let fp = fokker_planck_rhs(&st, &m, &Tolerances::default()).unwrap();
        for (b, f) in rhs.iter().zip(&fp) {
            assert!((trace(b).re - f).abs() < 1e-10);
        }
    }

    #[test]
    fn heat_equation_variance_growth() {
        // Scalar Gaussian: variance grows at rate D_C.
        let grid = Grid::periodic_1d(400, -20.0, 20.0).unwrap();
        let dc = 0.8;
        let m = DiffusiveModel::constant(
            scalar(0.0),
            vec![],
            CMat::zeros(0, 0),
            RMat::from_element(1, 1, dc),
            CMat::zeros(1, 0),
            RVec::zeros(1),
        )
        .unwrap();
        let s0 = 1.0;
        let st = HybridStateGrid::from_fn(grid.clone(), |x| {
            scalar((-x[0] * x[0] / (2.0 * s0)).exp() / (2.0 * PI * s0).sqrt())
        })
        .unwrap();
        let out = integrate_grid(&st, &m, 1.0, 1e-3, Scheme::Rk4, usize::MAX, 0.25).unwrap();
        let fin = out.last().unwrap();
        let var: f64 = (0..grid.n_nodes())
            .map(|i| grid.coord(i)[0].powi(2) * fin.blocks[i][(0, 0)].re)
            .sum::<f64>()
            * grid.cell_volume();
        assert!((var - (s0 + dc)).abs() < 1e-3, "var {var}");
        assert!((fin.total_probability() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn advection_moves_the_marginal() {
        let grid = Grid::periodic_1d(800, -10.0, 10.0).unwrap();
        let m = DiffusiveModel::constant(
            scalar(0.0),
            vec![],
            CMat::zeros(0, 0),
            RMat::zeros(1, 1),
            CMat::zeros(1, 0),
            RVec::from_vec(vec![1.5]),
        )
        .unwrap();
        let st = HybridStateGrid::from_fn(grid.clone(), |x| scalar((-x[0] * x[0]).exp())).unwrap();
        let fp = fokker_planck_rhs(&st, &m, &Tolerances::default()).unwrap();
        for i in 0..grid.n_nodes() {
            let x = grid.coord(i)[0];
            let exact = -1.5 * (-2.0 * x) * (-x * x).exp();
            assert!((fp[i] - exact).abs() < 5e-3);
        }
    }

    #[test]
    fn grid_errors() {
        let small = Grid::new(vec![2], vec![0.0], vec![0.1], Boundary::Absorbing).unwrap();
        let st = HybridStateGrid::zeros(small, 2);
        assert!(matches!(
            diffusive_rhs(&st, &two_level(0.0)),
            Err(Error::BoundaryUnderflow { axis: 0, len: 2 })
        ));
        let grid = Grid::periodic_1d(100, 0.0, 1.0).unwrap();
        let st = HybridStateGrid::zeros(grid, 2);
        assert!(matches!(
            integrate_grid(&st, &two_level(0.0), 1.0, 1e-3, Scheme::Rk4, 1, 0.25),
            Err(Error::CflViolation { .. })
        ));
    }

    #[test]
    fn rk4_order_on_grid() {
        let grid = Grid::periodic_1d(32, 0.0, 2.0 * PI).unwrap();
        let st = smooth_state(&grid);
        let m = two_level(0.5);
        let run = |dt: f64| {
            integrate_grid(&st, &m, 0.2, dt, Scheme::Rk4, usize::MAX, 10.0)
                .unwrap()
                .last()
                .unwrap()
                .blocks
                .clone()
        };
        let r = run(0.0025);
        let e1: f64 = run(0.02)
            .iter()
            .zip(&r)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max);
        let e2: f64 = run(0.01)
            .iter()
            .zip(&r)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max);
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.5, "order {order}");
    }

    fn lattice_state(grid: &Grid, st: &HybridStateGrid) -> HybridStateDiscrete {
        let pts = (0..grid.n_nodes())
            .map(|i| Point(grid.multi_index(i).iter().map(|&k| k as i64).collect()))
            .collect();
        HybridStateDiscrete::new(pts, st.blocks.clone()).unwrap()
    }

    fn eps_error(
        model: &DiffusiveModel,
        n: usize,
        exact: &dyn Fn(&Grid, &HybridStateGrid) -> Vec<CMat>,
    ) -> f64 {
        let grid = Grid::periodic_1d(n, 0.0, 2.0 * PI).unwrap();
        let st = smooth_state(&grid);
        let em = build_epsilon_model(model, &grid, EpsilonOptions::default()).unwrap();
        let d = hme_rhs(&lattice_state(&grid, &st), &em).unwrap();
        let ex = exact(&grid, &st);
        d.iter()
            .zip(&ex)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max)
    }

    #[test]
    fn epsilon_model_converges_at_second_order() {
        let m = two_level(0.6);
        // Oracle: the diffusive RHS on a very fine grid, sampled at the coarse nodes.
        let fine_n = 2048;
        let fine = Grid::periodic_1d(fine_n, 0.0, 2.0 * PI).unwrap();
        let fine_rhs = diffusive_rhs(&smooth_state(&fine), &m).unwrap();
        let exact = |g: &Grid, _: &HybridStateGrid| {
            (0..g.n_nodes())
                .map(|i| fine_rhs[i * (fine_n / g.n_nodes())].clone())
                .collect()
        };
        let errs: Vec<f64> = [32, 64, 128]
            .iter()
            .map(|&n| eps_error(&m, n, &exact))
            .collect();
        let order = ((errs[0] / errs[2]).log2()) / 2.0;
        assert!(order >= 1.8, "errors {errs:?}, order {order}");
    }

    #[test]
    fn epsilon_model_diffusion_only_on_cosine() {
        // D_C only: RHS of ρ = cos(kx) is −½k²D_C cos(kx) + O(ε²).
        let dc = 0.7;
        let m = DiffusiveModel::constant(
            scalar(0.0),
            vec![],
            CMat::zeros(0, 0),
            RMat::from_element(1, 1, dc),
            CMat::zeros(1, 0),
            RVec::zeros(1),
        )
        .unwrap();
        let k = 3.0;
        let mut errs = Vec::new();
        for n in [64, 128] {
            let grid = Grid::periodic_1d(n, 0.0, 2.0 * PI).unwrap();
            let st = HybridStateGrid::from_fn(grid.clone(), |x| scalar((k * x[0]).cos())).unwrap();
            let em = build_epsilon_model(&m, &grid, EpsilonOptions::default()).unwrap();
            let d = hme_rhs(&lattice_state(&grid, &st), &em).unwrap();
            let e = (0..n)
                .map(|i| (d[i][(0, 0)].re + 0.5 * k * k * dc * (k * grid.coord(i)[0]).cos()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!((errs[0] / errs[1] - 4.0).abs() < 0.2, "{errs:?}");
    }

    #[test]
    fn epsilon_model_backaction_on_linear_state() {
        // 𝒢-only cross term on a state linear in x reproduces ∂(𝒢̄L̂ρ̂ + h.c.) exactly
        // away from the periodic seam (central differences are exact on linear data).
        let [_, _, s3] = pauli();
        let g = 0.5;
        let m = DiffusiveModel::constant(
            CMat::zeros(2, 2),
            vec![s3.clone()],
            scalar(1.0),
            RMat::from_element(1, 1, 1.0),
            scalar(g),
            RVec::zeros(1),
        )
        .unwrap();
        let grid = Grid::periodic_1d(40, 0.0, 4.0).unwrap();
        let a0 = Bloch {
            weight: 1.0,
            s: [0.2, 0.1, 0.3],
        }
        .to_matrix();
        let a1 = Bloch {
            weight: 0.1,
            s: [0.0, 0.5, -0.4],
        }
        .to_matrix();
        let st = HybridStateGrid::from_fn(grid.clone(), |x| &a0 + &a1 * cr(x[0])).unwrap();
        let em = build_epsilon_model(&m, &grid, EpsilonOptions::default()).unwrap();
        let d = hme_rhs(&lattice_state(&grid, &st), &em).unwrap();
        for i in 2..38 {
            let rho = &st.blocks[i];
            // Second derivatives vanish; only GKLS and the backaction term remain.
            let expected = &s3 * rho * &s3 - rho + (&s3 * &a1 + &a1 * &s3) * cr(g);
            assert!(max_abs(&(&d[i] - expected)) < 1e-12, "node {i}");
        }
    }

    #[test]
    fn epsilon_model_preserves_trace_and_rejects_varying_backaction() {
        let grid = Grid::periodic_1d(16, 0.0, 2.0 * PI).unwrap();
        let em = build_epsilon_model(&two_level(0.8), &grid, EpsilonOptions::default()).unwrap();
        let st = lattice_state(&grid, &smooth_state(&grid));
        let d = hme_rhs(&st, &em).unwrap();
        assert!(d.iter().map(|b| trace(b).re).sum::<f64>().abs() < 1e-12);
        let mut m = two_level(0.5);
        m.grid = Some(grid.clone());
        m.g = Field::Table((0..16).map(|i| scalar(0.1 * i as f64)).collect());
        assert!(matches!(
            build_epsilon_model(&m, &grid, EpsilonOptions::default()),
            Err(Error::UnsupportedXDependence(_))
        ));
    }

    #[test]
    fn naive_half_noise_discrepancy_is_absent() {
        // The ε-model reproduces the full D_Q dephasing: for a flat state the
        // off-diagonal element decays at rate 2D_Q, not D_Q.
        let grid = Grid::periodic_1d(16, 0.0, 2.0 * PI).unwrap();
        let rho = Bloch {
            weight: 1.0 / (2.0 * PI),
            s: [1.0, 0.0, 0.0],
        }
        .to_matrix();
        let st = HybridStateGrid::from_fn(grid.clone(), |_| rho.clone()).unwrap();
        let em = build_epsilon_model(&two_level(0.0), &grid, EpsilonOptions::default()).unwrap();
        let d = hme_rhs(&lattice_state(&grid, &st), &em).unwrap();
        for b in &d {
            assert!((b[(0, 1)] + rho[(0, 1)] * cr(2.0)).norm() < 1e-12);
        }
    }
}
