//! Canonical hybrid master equation on a discrete classical space:
//!
//! ```text
//! dρ̂(x)/dt = −i[Ĥ(x), ρ̂(x)]
//!            + Σ_{y,α} ( L̂_α(x,y) ρ̂(y) L̂_α(x,y)† − Herm L̂_α(y,x)†L̂_α(y,x) ρ̂(x) )
//! ```
//!
//! with `Herm A = ½(A + A†)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::{integrate_blocks, Sampled, Scheme};
use crate::linalg::{cr, trace, CMat, I};
use crate::model::DiscreteModel;
use crate::state::{HybridStateDiscrete, Tolerances};

/// Cached per-point loss operators `Γ(x) = Σ L̂†L̂` and effective
/// non-Hermitian generators `K(x) = −iĤ(x) − ½Γ(x)`.
#[derive(Debug, Clone)]
pub struct HmeRhsWorkspace {
    pub gamma: Vec<CMat>,
    k: Vec<CMat>,
}

/// Above this many points the right-hand side is evaluated in parallel.
const PAR_THRESHOLD: usize = 64;

impl HmeRhsWorkspace {
    pub fn new(model: &DiscreteModel) -> Self {
        let gamma = model.loss_operators();
        let k = model
            .h
            .iter()
            .zip(&gamma)
            .map(|(h, g)| h * (-I) - g * cr(0.5))
            .collect();
        Self { gamma, k }
    }

    /// Writes the HME right-hand side of `blocks` into `out`.
    pub fn rhs(&self, model: &DiscreteModel, blocks: &[CMat], out: &mut [CMat]) {
        let local = |(x, o): (usize, &mut CMat)| {
            let kr = &self.k[x] * &blocks[x];
            o.copy_from(&kr);
            *o += kr.adjoint();
        };
        if blocks.len() >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(local);
        } else {
            out.iter_mut().enumerate().for_each(local);
        }
        for g in &model.generators {
            for e in &g.entries {
                out[e.to] += &e.op * &blocks[e.from] * e.op.adjoint();
            }
        }
    }
}

fn check_shapes(state: &HybridStateDiscrete, model: &DiscreteModel) -> Result<()> {
    if state.len() != model.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "state has {} points, model {}",
            state.len(),
            model.n_points()
        )));
    }
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

/// Time derivative of every block.
pub fn hme_rhs(state: &HybridStateDiscrete, model: &DiscreteModel) -> Result<Vec<CMat>> {
    check_shapes(state, model)?;
    let ws = HmeRhsWorkspace::new(model);
    let mut out = vec![CMat::zeros(model.dim, model.dim); state.len()];
    ws.rhs(model, &state.blocks, &mut out);
    Ok(out)
}

/// Classical kinetic equation `dρ(x)/dt = Σ_{y,α} T_α(x,y)ρ(y) − T(x)ρ(x)`
/// with rates evaluated on conditional states; blocks with zero weight
/// contribute nothing.
pub fn kinetic_rhs(
    state: &HybridStateDiscrete,
    model: &DiscreteModel,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    check_shapes(state, model)?;
    let mut out = vec![0.0; state.len()];
    for g in &model.generators {
        for e in &g.entries {
            let Ok(sigma) = state.conditional_state(e.from, tol) else {
                continue;
            };
            let rho_y = trace(&state.blocks[e.from]).re;
            let rate = trace(&(e.op.adjoint() * &e.op * sigma.matrix())).re;
            out[e.to] += rate * rho_y;
            out[e.from] -= rate * rho_y;
        }
    }
    Ok(out)
}

/// Fixed-step integration; the trace is not renormalized (its drift is a
/// diagnostic). `dt` is shrunk slightly if needed to land on `t_end`.
pub fn integrate_discrete(
    state: &HybridStateDiscrete,
    model: &DiscreteModel,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    sample_every: usize,
) -> Result<Sampled<HybridStateDiscrete>> {
    check_shapes(state, model)?;
    let ws = HmeRhsWorkspace::new(model);
    let points = state.points.clone();
    integrate_blocks(
        state.blocks.clone(),
        t_end,
        dt,
        scheme,
        sample_every,
        |y, out| {
            ws.rhs(model, y, out);
            Ok(())
        },
        |y| HybridStateDiscrete {
            points: points.clone(),
            blocks: y.to_vec(),
        },
    )
}
