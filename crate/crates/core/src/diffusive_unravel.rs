//! Diffusive unravelings: coupled stochastic evolution of `(x_t, ψ_t)` or
//! `(x_t, σ̂_t)` whose ensemble average solves the diffusive HME.
//!
//! Pure update (Euler–Maruyama, then renormalized):
//!
//! ```text
//! dx  = V dt − 2 Re(𝒢̄⟨L⟩) dt − dW
//! dψ  = K ψ dt + (L_α − ⟨L_α⟩) ψ dξ̄^α
//! K   = −iH − ½ D^{αβ} (L_β†L_α − 2⟨L_β†⟩L_α + ⟨L_β†⟩⟨L_α⟩)
//! ```

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::step_plan;
use crate::json;
use crate::linalg::{all_finite, cr, herm, sqrt_psd, trace, CMat, CVec, RMat, RVec, C64, I};
use crate::model::{DiffusiveModel, LocalCoefficients};
use crate::noise::{
    build_noise_covariance, monitored_xi, Fqc, NoiseCovariance, NoiseIncrement, NoiseSpec,
    XiXiChoice,
};
use crate::rng::{par_trajectories, TrajectoryRng};
use crate::state::{Grid, HybridStateGrid, QuantumState, TrajectoryState};

/// `−iĤ_fr` for a pure state: `K + iH`.
pub fn frictional_h_diffusive(psi: &CVec, l: &[CMat], d: &CMat) -> CMat {
    let dim = psi.len();
    let ev: Vec<C64> = l.iter().map(|la| crate::linalg::expect(la, psi)).collect();
    frictional_from_expectations(&ev, l, d, dim)
}

fn frictional_from_expectations(ev: &[C64], l: &[CMat], d: &CMat, dim: usize) -> CMat {
    let mut k = CMat::zeros(dim, dim);
    for (a, la) in l.iter().enumerate() {
        for (b, lb) in l.iter().enumerate() {
            let dab = d[(a, b)];
            if dab == C64::new(0.0, 0.0) {
                continue;
            }
            let eb = ev[b].conj();
            let mut term = lb.adjoint() * la - la * (cr(2.0) * eb);
            for i in 0..dim {
                term[(i, i)] += eb * ev[a];
            }
            k -= term * (cr(0.5) * dab);
        }
    }
    k
}

/// Purity production rate `d tr σ̂²/dt = 2 D^{αβ} tr[(√σ A_β √σ)†(√σ A_α √σ)]`,
/// `A = L − ⟨L⟩`, for noise with `dξ dξ = 0`.
pub fn purity_rate(sigma: &CMat, l: &[CMat], d: &CMat) -> f64 {
    let dim = sigma.nrows();
    let root = sqrt_psd(sigma);
    let sandwiched: Vec<CMat> = l
        .iter()
        .map(|la| {
            let mut a = la.clone();
            let e = trace(&(la * sigma));
            for i in 0..dim {
                a[(i, i)] -= e;
            }
            &root * a * &root
        })
        .collect();
    let mut rate = C64::new(0.0, 0.0);
    for (a, sa) in sandwiched.iter().enumerate() {
        for (b, sb) in sandwiched.iter().enumerate() {
            rate += d[(a, b)] * trace(&(sb.adjoint() * sa));
        }
    }
    2.0 * rate.re
}

/// Classical drift `V − 2 Re(𝒢̄⟨L⟩)`.
fn classical_drift(loc: &LocalCoefficients, ev: &[C64]) -> RVec {
    let mut drift = loc.v.clone();
    for n in 0..drift.len() {
        let mut s = C64::new(0.0, 0.0);
        for (a, e) in ev.iter().enumerate() {
            s += loc.g[(n, a)].conj() * e;
        }
        drift[n] -= 2.0 * s.re;
    }
    drift
}

/// Classical update; returns `dW` as recovered from the new position so that
/// replaying a recorded path reproduces the same arithmetic.
fn move_classical(x: &mut [f64], drift: &RVec, dw: &RVec, dt: f64) -> RVec {
    let mut eff = RVec::zeros(x.len());
    for n in 0..x.len() {
        let pred = x[n] + drift[n] * dt;
        let next = pred - dw[n];
        eff[n] = pred - next;
        x[n] = next;
    }
    eff
}

/// Stepper for one model and noise choice. Constant coefficients and noise
/// factorizations are computed once.
#[derive(Debug, Clone)]
pub struct DiffusiveStepper {
    model: DiffusiveModel,
    spec: NoiseSpec,
    local: Option<LocalCoefficients>,
    noise: Option<(CMat, NoiseCovariance)>,
}

impl DiffusiveStepper {
    pub fn new(model: &DiffusiveModel, spec: NoiseSpec) -> Result<Self> {
        let all_const = model.h.is_const()
            && model.generators.iter().all(|f| f.is_const())
            && model.dq.is_const()
            && model.dc.is_const()
            && model.g.is_const()
            && model.v.is_const();
        let noise_const = model.dq.is_const() && model.dc.is_const() && model.g.is_const();
        let x0 = vec![0.0; model.n_classical];
        let local = if all_const {
            Some(model.at_point(&x0)?)
        } else {
            None
        };
        let mut stepper = Self {
            model: model.clone(),
            spec,
            local,
            noise: None,
        };
        if noise_const {
            let loc = model.at_point(&x0)?;
            stepper.noise = Some(stepper.build_noise(&loc)?);
        }
        Ok(stepper)
    }

    pub fn model(&self) -> &DiffusiveModel {
        &self.model
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    fn build_noise(&self, loc: &LocalCoefficients) -> Result<(CMat, NoiseCovariance)> {
        let target = self.spec.target(&loc.dq, &loc.dc, &loc.g)?;
        let cov = build_noise_covariance(&target, &loc.dc, &loc.g, &self.spec.xi_xi)?;
        Ok((target, cov))
    }

    pub fn local(&self, x: &[f64]) -> Result<Cow<'_, LocalCoefficients>> {
        match &self.local {
            Some(l) => Ok(Cow::Borrowed(l)),
            None => Ok(Cow::Owned(self.model.at_point(x)?)),
        }
    }

    /// Target quantum noise matrix and the covariance of `(dξ, dW)` at `x`.
    pub fn noise(&self, loc: &LocalCoefficients) -> Result<Cow<'_, (CMat, NoiseCovariance)>> {
        match &self.noise {
            Some(n) => Ok(Cow::Borrowed(n)),
            None => Ok(Cow::Owned(self.build_noise(loc)?)),
        }
    }

    /// Draw increments at `x` and advance `state` by `dt`. Returns the
    /// increments actually applied.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut TrajectoryState,
        dt: f64,
        rng: &mut R,
    ) -> Result<NoiseIncrement> {
        let x = coords(state)?.to_vec();
        let loc = self.local(&x)?;
        let noise = self.noise(&loc)?;
        let inc = noise.1.sample(dt, rng);
        apply_increment(&loc, &noise.0, noise.1.monitored.as_ref(), state, &inc, dt)
    }
}

/// Advance `state` by `dt` with given increments and quantum noise matrix `d`.
/// For monitored noise `dξ` is recomputed from the applied `dW`.
pub fn apply_increment(
    loc: &LocalCoefficients,
    d: &CMat,
    monitored: Option<&Fqc>,
    state: &mut TrajectoryState,
    inc: &NoiseIncrement,
    dt: f64,
) -> Result<NoiseIncrement> {
    let t_next = state.t + dt;
    let x = match &mut state.x {
        crate::state::ClassicalCoord::Point(p) => p,
        crate::state::ClassicalCoord::Site(_) => {
            return Err(Error::InvalidArgument(
                "diffusive unraveling needs a point in R^N".into(),
            ))
        }
    };
    let applied = match &mut state.quantum {
        QuantumState::Pure(psi) => {
            let ev: Vec<C64> = loc
                .l
                .iter()
                .map(|la| crate::linalg::expect(la, psi))
                .collect();
            let drift = classical_drift(loc, &ev);
            let dw = move_classical(x, &drift, &inc.dw, dt);
            let dxi = match monitored {
                Some(f) => f.xi(&dw),
                None => inc.dxi.clone(),
            };
            let k = frictional_from_expectations(&ev, &loc.l, d, psi.len()) - &loc.h * I;
            let mut next = &*psi + (&k * &*psi) * cr(dt);
            for (a, la) in loc.l.iter().enumerate() {
                let w = dxi[a].conj();
                next += (la * &*psi - &*psi * ev[a]) * w;
            }
            let norm = next.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::NonFinite { t: t_next });
            }
            *psi = next / cr(norm);
            NoiseIncrement { dw, dxi }
        }
        QuantumState::Mixed(sigma) => {
            let ev: Vec<C64> = loc.l.iter().map(|la| trace(&(la * &*sigma))).collect();
            let drift = classical_drift(loc, &ev);
            let dw = move_classical(x, &drift, &inc.dw, dt);
            let dxi = match monitored {
                Some(f) => f.xi(&dw),
                None => inc.dxi.clone(),
            };
            let s = &*sigma;
            let mut gen = (&loc.h * s - s * &loc.h) * (-I);
            for (a, la) in loc.l.iter().enumerate() {
                for (b, lb) in loc.l.iter().enumerate() {
                    let dab = d[(a, b)];
                    if dab == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let lbl = lb.adjoint() * la;
                    gen += (la * s * lb.adjoint() - (&lbl * s + s * &lbl) * cr(0.5)) * dab;
                }
            }
            let mut next = s + gen * cr(dt);
            for (a, la) in loc.l.iter().enumerate() {
                let mut am = la.clone();
                for i in 0..am.nrows() {
                    am[(i, i)] -= ev[a];
                }
                let kick = am * s * dxi[a].conj();
                next += &kick + kick.adjoint();
            }
            let next = herm(&next);
            let tr = trace(&next).re;
            if !(tr > 0.0 && tr.is_finite()) || !all_finite(&next) {
                return Err(Error::NonFinite { t: t_next });
            }
            *sigma = next / cr(tr);
            NoiseIncrement { dw, dxi }
        }
    };
    state.t = t_next;
    Ok(applied)
}

fn coords(state: &TrajectoryState) -> Result<&[f64]> {
    state
        .coords()
        .ok_or_else(|| Error::InvalidArgument("diffusive unraveling needs a point in R^N".into()))
}

/// One pure Euler–Maruyama step with full noise and `dξ dξ = 0`.
pub fn step_pure<R: Rng + ?Sized>(
    state: &mut TrajectoryState,
    model: &DiffusiveModel,
    dt: f64,
    rng: &mut R,
) -> Result<NoiseIncrement> {
    DiffusiveStepper::new(model, NoiseSpec::zero())?.step(state, dt, rng)
}

/// One mixed-state step with full noise and `dξ dξ = 0`.
pub fn step_mixed<R: Rng + ?Sized>(
    state: &mut TrajectoryState,
    model: &DiffusiveModel,
    dt: f64,
    rng: &mut R,
) -> Result<NoiseIncrement> {
    DiffusiveStepper::new(model, NoiseSpec::zero())?.step(state, dt, rng)
}

/// One step of the monitored unraveling driven by a given `dW`: `dξ = F̄ dW`.
pub fn step_monitored_with(
    state: &mut TrajectoryState,
    model: &DiffusiveModel,
    dw: &RVec,
    dt: f64,
) -> Result<NoiseIncrement> {
    let loc = model.at_point(coords(state)?)?;
    let dxi = monitored_xi(dw, &loc.dq, &loc.dc, &loc.g)?;
    let inc = NoiseIncrement {
        dw: dw.clone(),
        dxi,
    };
    apply_increment(&loc, &loc.dq, None, state, &inc, dt)
}

/// One step of the monitored unraveling with `dW ~ N(0, D_C dt)`.
pub fn step_monitored<R: Rng + ?Sized>(
    state: &mut TrajectoryState,
    model: &DiffusiveModel,
    dt: f64,
    rng: &mut R,
) -> Result<NoiseIncrement> {
    let loc = model.at_point(coords(state)?)?;
    let n = loc.dc.nrows();
    let cov = build_noise_covariance(
        &CMat::zeros(0, 0),
        &loc.dc,
        &CMat::zeros(n, 0),
        &XiXiChoice::Zero,
    )?;
    let dw = cov.sample(dt, rng).dw;
    step_monitored_with(state, model, &dw, dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveOptions {
    pub t_end: f64,
    pub dt: f64,
    pub sample_every: usize,
    /// Keep `x` after every step (needed for replay).
    #[serde(default)]
    pub record_path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveTrajectory {
    pub samples: Vec<TrajectoryState>,
    /// `x` at every step including the start, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<Vec<f64>>,
}

pub fn simulate_diffusive_trajectory<R: Rng + ?Sized>(
    init: TrajectoryState,
    stepper: &DiffusiveStepper,
    opts: &DiffusiveOptions,
    rng: &mut R,
) -> Result<DiffusiveTrajectory> {
    coords(&init)?;
    let (n, h) = step_plan(opts.t_end, opts.dt)?;
    let every = opts.sample_every.max(1);
    let mut state = init;
    let mut out = DiffusiveTrajectory {
        samples: vec![state.clone()],
        path: Vec::new(),
    };
    if opts.record_path {
        out.path.reserve(n + 1);
        out.path.push(coords(&state)?.to_vec());
    }
    for k in 1..=n {
        stepper.step(&mut state, h, rng)?;
        state.t = k as f64 * h;
        if opts.record_path {
            out.path.push(coords(&state)?.to_vec());
        }
        if k % every == 0 || k == n {
            out.samples.push(state.clone());
        }
    }
    Ok(out)
}

/// Reconstruct `ψ_t` at every step of a monitored trajectory from its
/// classical path alone.
pub fn replay(
    model: &DiffusiveModel,
    path: &[Vec<f64>],
    psi0: &CVec,
    dt: f64,
) -> Result<Vec<CVec>> {
    let stepper = DiffusiveStepper::new(model, NoiseSpec::monitored())?;
    if path.is_empty() {
        return Err(Error::InvalidArgument("empty classical path".into()));
    }
    let mut state = TrajectoryState::pure_at_point(path[0].clone(), psi0.clone());
    let mut out = vec![psi0.clone()];
    for w in path.windows(2) {
        let loc = stepper.local(&w[0])?;
        let noise = stepper.noise(&loc)?;
        let f = noise.1.monitored.as_ref().expect("monitored noise");
        let psi = state.psi().expect("pure");
        let ev: Vec<C64> = loc
            .l
            .iter()
            .map(|la| crate::linalg::expect(la, psi))
            .collect();
        let drift = classical_drift(&loc, &ev);
        // Invert x' = (x + drift·dt) − dW.
        let dw = RVec::from_iterator(
            w[0].len(),
            (0..w[0].len()).map(|n| (w[0][n] + drift[n] * dt) - w[1][n]),
        );
        let inc = NoiseIncrement { dxi: f.xi(&dw), dw };
        apply_increment(&loc, &noise.0, Some(f), &mut state, &inc, dt)?;
        if state.coords() != Some(&w[1][..]) {
            return Err(Error::InvalidArgument(
                "classical path is not reproduced by replay".into(),
            ));
        }
        out.push(state.psi().expect("pure").clone());
    }
    Ok(out)
}

/// `m` trajectories with streams `first_index..first_index+m`. `init` may draw
/// the initial condition from the trajectory's own stream.
pub fn run_diffusive_ensemble<F>(
    stepper: &DiffusiveStepper,
    opts: &DiffusiveOptions,
    master_seed: u64,
    first_index: usize,
    m: usize,
    init: F,
) -> Result<Vec<DiffusiveTrajectory>>
where
    F: Fn(usize, &mut TrajectoryRng) -> Result<TrajectoryState> + Sync,
{
    par_trajectories(m, master_seed, |k, _| {
        let mut rng = crate::rng::trajectory_rng(master_seed, (first_index + k) as u64);
        let s0 = init(first_index + k, &mut rng)?;
        simulate_diffusive_trajectory(s0, stepper, opts, &mut rng)
    })
}

/// Histogram of trajectory states on a grid: estimate of the hybrid density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    pub mean: HybridStateGrid,
    /// Standard errors of the real and imaginary parts per node.
    #[serde(with = "json::cmat_vec")]
    pub stderr: Vec<CMat>,
    pub n_trajectories: usize,
    /// Trajectories that fell outside an absorbing grid.
    pub outside: usize,
}

/// Bin sample `k` of every trajectory to its nearest node, dividing by `M·ΔV`.
pub fn grid_estimate(
    trajs: &[DiffusiveTrajectory],
    k: usize,
    grid: &Grid,
    dim: usize,
) -> Result<GridEstimate> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one trajectory".into(),
        ));
    }
    let nn = grid.n_nodes();
    let m = trajs.len() as f64;
    let vol = grid.cell_volume();
    let mut sum = vec![CMat::zeros(dim, dim); nn];
    let mut sq_re = vec![RMat::zeros(dim, dim); nn];
    let mut sq_im = vec![RMat::zeros(dim, dim); nn];
    let mut outside = 0;
    for tr in trajs {
        let s = tr
            .samples
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory has no sample {k}")))?;
        let Some(node) = grid.nearest_node(coords(s)?) else {
            outside += 1;
            continue;
        };
        let p = s.quantum.density() / cr(vol);
        sq_re[node] += p.map(|z| z.re * z.re);
        sq_im[node] += p.map(|z| z.im * z.im);
        sum[node] += p;
    }
    let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let mut mean = Vec::with_capacity(nn);
    let mut stderr = Vec::with_capacity(nn);
    for x in 0..nn {
        let mu = &sum[x] / cr(m);
        stderr.push(CMat::from_fn(dim, dim, |i, j| {
            let vr = (sq_re[x][(i, j)] / m - mu[(i, j)].re.powi(2)).max(0.0);
            let vi = (sq_im[x][(i, j)] / m - mu[(i, j)].im.powi(2)).max(0.0);
            C64::new((vr * corr / m).sqrt(), (vi * corr / m).sqrt())
        }));
        mean.push(mu);
    }
    Ok(GridEstimate {
        mean: HybridStateGrid::new(grid.clone(), mean)?,
        stderr,
        n_trajectories: trajs.len(),
        outside,
    })
}

/// Node-wise estimates of the fields `tr(Ô ρ̂(x))` for Hermitian observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    /// `mean[o][node]`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    /// Samples per node.
    pub counts: Vec<usize>,
    pub n_trajectories: usize,
    pub outside: usize,
}

/// Bin sample `k` of every trajectory to its nearest node and estimate
/// `tr(Ô ρ̂(x))` for each observable. Unlike the entrywise estimate, every
/// field carries the bin-count fluctuation in its error.
pub fn field_estimate(
    trajs: &[DiffusiveTrajectory],
    k: usize,
    grid: &Grid,
    observables: &[CMat],
) -> Result<FieldEstimate> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one trajectory".into(),
        ));
    }
    let nn = grid.n_nodes();
    let no = observables.len();
    let m = trajs.len() as f64;
    let vol = grid.cell_volume();
    let mut sum = vec![vec![0.0; nn]; no];
    let mut sq = vec![vec![0.0; nn]; no];
    let mut counts = vec![0; nn];
    let mut outside = 0;
    for tr in trajs {
        let s = tr
            .samples
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory has no sample {k}")))?;
        let Some(node) = grid.nearest_node(coords(s)?) else {
            outside += 1;
            continue;
        };
        counts[node] += 1;
        for (o, obs) in observables.iter().enumerate() {
            let v = s.quantum.expect(obs).re / vol;
            sum[o][node] += v;
            sq[o][node] += v * v;
        }
    }
    let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let mut mean = vec![vec![0.0; nn]; no];
    let mut stderr = vec![vec![0.0; nn]; no];
    for o in 0..no {
        for x in 0..nn {
            let mu = sum[o][x] / m;
            mean[o][x] = mu;
            stderr[o][x] = ((sq[o][x] / m - mu * mu).max(0.0) * corr / m).sqrt();
        }
    }
    Ok(FieldEstimate {
        mean,
        stderr,
        counts,
        n_trajectories: trajs.len(),
        outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis, c, max_abs, pauli};
    use crate::model::scalar;
    use crate::rng::trajectory_rng;

    fn qubit_model(g: f64, dq: f64, dc: f64) -> DiffusiveModel {
        let [_, _, s3] = pauli();
        DiffusiveModel::constant(
            CMat::zeros(2, 2),
            vec![s3],
            scalar(dq),
            RMat::from_element(1, 1, dc),
            scalar(g),
            RVec::zeros(1),
        )
        .unwrap()
    }

    fn plus() -> CVec {
        (basis(2, 0) + basis(2, 1)) / cr(2f64.sqrt())
    }

    #[test]
    fn frictional_examples() {
        let [s1, _, s3] = pauli();
        // Eigenstate: the friction term vanishes.
        let k = frictional_h_diffusive(&basis(2, 0), std::slice::from_ref(&s3), &scalar(1.0));
        assert!(max_abs(&(&k * basis(2, 0))) < 1e-15);
        // |+⟩ with σ₃: −½(1 − 0 + 0) = −½.
        let k = frictional_h_diffusive(&plus(), std::slice::from_ref(&s3), &scalar(1.0));
        assert!(max_abs(&(k + CMat::identity(2, 2) * cr(0.5))) < 1e-15);
        // Zero D: nothing.
        let k = frictional_h_diffusive(&plus(), &[s1], &scalar(0.0));
        assert_eq!(max_abs(&k), 0.0);
    }

    #[test]
    fn purity_rate_examples() {
        let [s1, _, s3] = pauli();
        let half = CMat::identity(2, 2) * cr(0.5);
        assert!((purity_rate(&half, std::slice::from_ref(&s3), &scalar(1.0)) - 1.0).abs() < 1e-14);
        let pure = basis(2, 0) * basis(2, 0).adjoint();
        assert!(purity_rate(&pure, std::slice::from_ref(&s3), &scalar(1.0)).abs() < 1e-14);
        assert!(purity_rate(&pure, &[s1], &scalar(0.0)).abs() < 1e-14);
    }

    #[test]
    fn purity_rate_matches_ensemble_increment() {
        // One short mixed step with dξdξ = 0: E[Δ tr σ²]/dt agrees with the formula.
        let [s1, _, s3] = pauli();
        let h = s1.clone() * cr(0.3);
        let l = vec![s3.clone(), s1.clone()];
        let dq = CMat::from_row_slice(2, 2, &[cr(1.0), c(0.0, 0.2), c(0.0, -0.2), cr(0.5)]);
        let model = DiffusiveModel::constant(
            h,
            l.clone(),
            dq.clone(),
            RMat::from_element(1, 1, 0.0),
            CMat::zeros(1, 2),
            RVec::zeros(1),
        )
        .unwrap();
        let stepper = DiffusiveStepper::new(&model, NoiseSpec::zero()).unwrap();
        let sigma0 = CMat::from_row_slice(2, 2, &[cr(0.7), c(0.1, 0.1), c(0.1, -0.1), cr(0.3)]);
        let p0 = trace(&(&sigma0 * &sigma0)).re;
        let dt = 1e-4;
        let n = 200_000;
        let mut rng = trajectory_rng(4, 0);
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let mut st = TrajectoryState::mixed_at_point(vec![0.0], sigma0.clone());
            stepper.step(&mut st, dt, &mut rng).unwrap();
            let s = st.sigma().unwrap();
            let r = (trace(&(s * s)).re - p0) / dt;
            acc += r;
            acc2 += r * r;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        let expected = purity_rate(&sigma0, &l, &dq);
        assert!(
            (mean - expected).abs() < 5.0 * se + 0.01,
            "{mean} vs {expected} (se {se})"
        );
    }

    #[test]
    fn gkls_limit_and_norm() {
        // 𝒢 = 0, D_C = 0: x stays put and the ensemble of pure states solves the local GKLS equation.
        let model = qubit_model(0.0, 1.0, 0.0);
        let stepper = DiffusiveStepper::new(&model, NoiseSpec::zero()).unwrap();
        let opts = DiffusiveOptions {
            t_end: 0.5,
            dt: 1e-3,
            sample_every: 500,
            record_path: false,
        };
        let trajs = run_diffusive_ensemble(&stepper, &opts, 11, 0, 2000, |_, _| {
            Ok(TrajectoryState::pure_at_point(vec![0.0], plus()))
        })
        .unwrap();
        let mut coh = C64::new(0.0, 0.0);
        for tr in &trajs {
            let last = tr.samples.last().unwrap();
            assert_eq!(last.coords(), Some(&[0.0][..]));
            assert!(last.quantum.norm_defect().abs() < 1e-12);
            coh += last.quantum.density()[(0, 1)];
        }
        coh /= cr(trajs.len() as f64);
        // Dephasing with L = σ₃, D = 1: ρ01 decays as e^{−2t}.
        let expected = 0.5 * (-1.0f64).exp();
        assert!((coh.re - expected).abs() < 0.02, "{coh} vs {expected}");
    }

    #[test]
    fn mixed_step_tracks_pure_step_on_pure_states() {
        let model = qubit_model(0.5, 1.0, 1.0);
        let stepper = DiffusiveStepper::new(&model, NoiseSpec::zero()).unwrap();
        for &dt in &[1e-4, 1e-6] {
            let mut worst: f64 = 0.0;
            for k in 0..200 {
                let mut rng = trajectory_rng(5, k);
                let mut pure = TrajectoryState::pure_at_point(vec![0.0], plus());
                let inc = stepper.step(&mut pure, dt, &mut rng).unwrap();
                let mut mixed =
                    TrajectoryState::mixed_at_point(vec![0.0], plus() * plus().adjoint());
                let loc = stepper.local(&[0.0]).unwrap();
                let noise = stepper.noise(&loc).unwrap();
                apply_increment(&loc, &noise.0, None, &mut mixed, &inc, dt).unwrap();
                worst = worst.max(max_abs(&(pure.quantum.density() - mixed.sigma().unwrap())));
                assert_eq!(pure.coords(), mixed.coords());
            }
            // Per-step difference is the Itô term dξdξ̄ − D dt, of order dt.
            assert!(worst < 20.0 * dt, "dt {dt}: {worst}");
        }
    }

    #[test]
    fn monitored_replay_is_exact() {
        let model = qubit_model(1.0, 1.0, 1.0);
        let stepper = DiffusiveStepper::new(&model, NoiseSpec::monitored()).unwrap();
        let opts = DiffusiveOptions {
            t_end: 0.5,
            dt: 1e-3,
            sample_every: 1,
            record_path: true,
        };
        let tr = simulate_diffusive_trajectory(
            TrajectoryState::pure_at_point(vec![0.0], plus()),
            &stepper,
            &opts,
            &mut trajectory_rng(6, 0),
        )
        .unwrap();
        let psis = replay(&model, &tr.path, &plus(), 1e-3).unwrap();
        assert_eq!(psis.len(), tr.samples.len());
        for (p, s) in psis.iter().zip(&tr.samples) {
            assert_eq!(p, s.psi().unwrap());
        }
    }

    #[test]
    fn monitored_stepper_matches_general_stepper() {
        let [s1, _, s3] = pauli();
        let l = vec![s3, s1.clone()];
        let g = CMat::from_row_slice(2, 2, &[cr(0.6), c(0.0, 0.3), cr(-0.2), cr(0.5)]);
        let dc = RMat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]);
        let dq = Fqc::new(&dc, &g).unwrap().dq_min(&g);
        let model =
            DiffusiveModel::constant(s1 * cr(0.4), l, dq, dc, g, RVec::from_vec(vec![0.1, -0.3]))
                .unwrap();
        let stepper = DiffusiveStepper::new(&model, NoiseSpec::monitored()).unwrap();
        let loc = stepper.local(&[0.0, 0.0]).unwrap().into_owned();
        let noise = stepper.noise(&loc).unwrap().into_owned();
        let mut a = TrajectoryState::pure_at_point(vec![0.0, 0.0], plus());
        let mut b = a.clone();
        let mut rng = trajectory_rng(8, 0);
        for _ in 0..1000 {
            let inc = noise.1.sample(1e-3, &mut rng);
            apply_increment(
                &loc,
                &noise.0,
                noise.1.monitored.as_ref(),
                &mut a,
                &inc,
                1e-3,
            )
            .unwrap();
            step_monitored_with(&mut b, &model, &inc.dw, 1e-3).unwrap();
            let dpsi = max_abs(&(a.psi().unwrap() - b.psi().unwrap()));
            let dx = (a.coords().unwrap()[0] - b.coords().unwrap()[0]).abs();
            assert!(dpsi <= 1e-10 && dx <= 1e-10, "{dpsi} {dx}");
        }
    }

    #[test]
    fn monitored_requires_condition() {
        let model = qubit_model(1.0, 1.0, 4.0);
        assert!(matches!(
            DiffusiveStepper::new(&model, NoiseSpec::monitored()),
            Err(Error::MonitoringInfeasible { .. })
        ));
    }

    #[test]
    fn classical_drift_sign() {
        // Pure |0⟩, σ₃ expectation 1, 𝒢 = 1, V = 0: drift −2.
        let model = qubit_model(1.0, 1.0, 0.0);
        let loc = model.at_point(&[0.0]).unwrap();
        let d = classical_drift(&loc, &[cr(1.0)]);
        assert_eq!(d[0], -2.0);
    }

    #[test]
    fn grid_estimate_normalization() {
        let grid = Grid::periodic_1d(8, 0.0, 1.0).unwrap();
        let trajs: Vec<DiffusiveTrajectory> = (0..4)
            .map(|k| DiffusiveTrajectory {
                samples: vec![TrajectoryState::pure_at_point(
                    vec![k as f64 * 0.25 + 8.0],
                    basis(2, 0),
                )],
                path: vec![],
            })
            .collect();
        let est = grid_estimate(&trajs, 0, &grid, 2).unwrap();
        let total: f64 =
            est.mean.blocks.iter().map(|b| trace(b).re).sum::<f64>() * grid.cell_volume();
        assert!((total - 1.0).abs() < 1e-14);
        assert_eq!(est.outside, 0);
    }
}
