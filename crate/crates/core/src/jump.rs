//! Jump unraveling of the discrete hybrid master equation.
//!
//! Between jumps x is frozen and ψ follows the norm-restored frictional
//! Schrödinger equation `dψ/dt = (−iĤ(x) − iĤ_fr(x) + ½T(x))ψ` with
//! `−iĤ_fr = −½Σ L̂†L̂`. A jump through channel (α, x') happens at rate
//! `T_α(x', x) = ‖L̂_α(x', x)ψ‖²` and maps `ψ → L̂_α(x', x)ψ / √T_α`.
//!
//! Time is discretized with a first-order scheme: in each step of length dt a
//! jump fires with probability `T(x)·dt`, otherwise ψ drifts by one RK4 step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::step_plan;
use crate::json;
use crate::linalg::{cr, expect, CMat, CVec, C64, I};
use crate::model::{gauge_shift_discrete, DiscreteModel};
use crate::rng::par_trajectories;
use crate::state::{HybridStateDiscrete, Point};

/// Rates `T_α(x', x)` out of the current point and their total.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpRates {
    pub channels: Vec<Channel>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub alpha: usize,
    pub to: usize,
    pub rate: f64,
}

/// `−iĤ_fr(x) = −½ Σ_{y,α} L̂_α(y,x)†L̂_α(y,x)`, stored as that matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionalH {
    pub minus_i_h_fr: CMat,
}

impl FrictionalH {
    pub fn new(model: &DiscreteModel, x: usize) -> Self {
        let mut m = CMat::zeros(model.dim, model.dim);
        for g in &model.generators {
            for e in g.entries.iter().filter(|e| e.from == x) {
                m -= e.op.adjoint() * &e.op * cr(0.5);
            }
        }
        Self { minus_i_h_fr: m }
    }
}

/// How diagonal generator blocks are treated while unraveling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Before every step shift `L̂_α(x,x) → L̂_α(x,x) − ⟨L̂_α(x,x)⟩_ψ` (with the
    /// compensating Hamiltonian), which makes the process independent of
    /// gauge shifts of the model.
    #[default]
    Dynamic,
    /// Use the generators as given.
    Raw,
}

/// Static variant: shift every diagonal block by `−⟨L̂_α(x,x)⟩` in `psi_ref`.
pub fn normalize_generators(model: &DiscreteModel, psi_ref: &CVec) -> Result<DiscreteModel> {
    if psi_ref.len() != model.dim {
        return Err(Error::ShapeMismatch(
            "reference state has the wrong dimension".into(),
        ));
    }
    let ell: Vec<Vec<C64>> = (0..model.generators.len())
        .map(|a| {
            (0..model.n_points())
                .map(|x| -expect(&model.diagonal(a, x), psi_ref))
                .collect()
        })
        .collect();
    gauge_shift_discrete(model, &ell)
}

/// Outgoing channel operators grouped by source point.
#[derive(Debug, Clone)]
struct Outgoing {
    /// (alpha, to, op) with to ≠ from.
    off: Vec<(usize, usize, CMat)>,
    /// (alpha, op) for L̂_α(x,x).
    diag: Vec<(usize, CMat)>,
    /// −iĤ − ½Γ with the unshifted generators.
    k0: CMat,
}

/// Precomputed per-point data for fast stepping.
#[derive(Debug, Clone)]
pub struct JumpStepper {
    out: Vec<Outgoing>,
    pub normalization: Normalization,
}

/// A fired jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub alpha: usize,
    pub from: usize,
    pub to: usize,
}

/// One trajectory record in the JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSample {
    pub t: f64,
    pub x: usize,
    #[serde(with = "json::cvec")]
    pub psi: CVec,
    pub jumps_so_far: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpTrajectory {
    pub samples: Vec<JumpSample>,
    pub jumps: Vec<JumpEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Record every this many steps (and the final step).
    pub sample_every: usize,
    pub normalization: Normalization,
}

impl JumpStepper {
    pub fn new(model: &DiscreteModel, normalization: Normalization) -> Self {
        let out = (0..model.n_points())
            .map(|x| {
                let mut o = Outgoing {
                    off: Vec::new(),
                    diag: Vec::new(),
                    k0: &model.h[x] * (-I),
                };
                for (a, g) in model.generators.iter().enumerate() {
                    for e in g.entries.iter().filter(|e| e.from == x) {
                        o.k0 -= e.op.adjoint() * &e.op * cr(0.5);
                        if e.to == x {
                            o.diag.push((a, e.op.clone()));
                        } else {
                            o.off.push((a, e.to, e.op.clone()));
                        }
                    }
                }
                o
            })
            .collect();
        Self { out, normalization }
    }

    /// Diagonal shifts `ℓ_α = −⟨L̂_α(x,x)⟩` for the current mode.
    fn shifts(&self, psi: &CVec, x: usize) -> Vec<C64> {
        match self.normalization {
            Normalization::Raw => vec![C64::new(0.0, 0.0); self.out[x].diag.len()],
            Normalization::Dynamic => self.out[x]
                .diag
                .iter()
                .map(|(_, l)| -expect(l, psi))
                .collect(),
        }
    }

    /// Effective drift generator `K' = −iĤ' − ½Γ'` of the shifted model,
    /// `K' = K₀ − Σ_α (ℓ̄_α L̂_α(x,x) + ½|ℓ_α|²)`, and `Γ'`.
    fn drift_generator(&self, x: usize, ell: &[C64]) -> (CMat, CMat) {
        let o = &self.out[x];
        let mut k = o.k0.clone();
        for ((_, l), &s) in o.diag.iter().zip(ell) {
            k -= l * s.conj();
            for i in 0..k.nrows() {
                k[(i, i)] -= cr(0.5 * s.norm_sqr());
            }
        }
        // Γ' = −(K' + K'†): the Hamiltonian part is anti-Hermitian.
        let gamma = -(&k + k.adjoint());
        (k, gamma)
    }

    /// Rates with the shifted diagonal blocks.
    fn rates_shifted(&self, psi: &CVec, x: usize, ell: &[C64]) -> JumpRates {
        let o = &self.out[x];
        let mut channels = Vec::with_capacity(o.off.len() + o.diag.len());
        for ((a, l), &s) in o.diag.iter().zip(ell) {
            let v = l * psi + psi * s;
            channels.push(Channel {
                alpha: *a,
                to: x,
                rate: v.norm_squared(),
            });
        }
        for (a, to, l) in &o.off {
            channels.push(Channel {
                alpha: *a,
                to: *to,
                rate: (l * psi).norm_squared(),
            });
        }
        let total = channels.iter().map(|c| c.rate).sum();
        JumpRates { channels, total }
    }

    fn jump_op(&self, x: usize, ch: &Channel, ell: &[C64]) -> CMat {
        let o = &self.out[x];
        if ch.to == x {
            let k = o
                .diag
                .iter()
                .position(|(a, _)| *a == ch.alpha)
                .expect("diagonal channel");
            let mut l = o.diag[k].1.clone();
            for i in 0..l.nrows() {
                l[(i, i)] += ell[k];
            }
            l
        } else {
            o.off
                .iter()
                .find(|(a, to, _)| *a == ch.alpha && *to == ch.to)
                .map(|(_, _, l)| l.clone())
                .expect("off-diagonal channel")
        }
    }

    /// One step of the first-order scheme. Returns the jump, if one fired.
    pub fn step<R: Rng + ?Sized>(
        &self,
        psi: &mut CVec,
        x: &mut usize,
        dt: f64,
        rng: &mut R,
    ) -> Result<Option<(usize, usize)>> {
        let ell = self.shifts(psi, *x);
        let rates = self.rates_shifted(psi, *x, &ell);
        let u: f64 = rng.random();
        if rates.total > 0.0 && u < rates.total * dt {
            let ch = choose_channel(&rates, rng)?;
            let l = self.jump_op(*x, &ch, &ell);
            let v = &l * &*psi;
            *psi = v * cr(1.0 / ch.rate.sqrt());
            psi.normalize_mut();
            *x = ch.to;
            return Ok(Some((ch.alpha, ch.to)));
        }
        let (k, gamma) = self.drift_generator(*x, &ell);
        *psi = rk4_frictional(psi, &k, &gamma, dt);
        let n = psi.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::NonFinite { t: f64::NAN });
        }
        psi.unscale_mut(n);
        Ok(None)
    }
}

fn choose_channel<R: Rng + ?Sized>(rates: &JumpRates, rng: &mut R) -> Result<Channel> {
    if !(rates.total > 0.0) {
        return Err(Error::ZeroTotalRate);
    }
    let target = rng.random::<f64>() * rates.total;
    let mut acc = 0.0;
    for ch in &rates.channels {
        acc += ch.rate;
        if target < acc && ch.rate > 0.0 {
            return Ok(ch.clone());
        }
    }
    Ok(rates
        .channels
        .iter()
        .rev()
        .find(|c| c.rate > 0.0)
        .cloned()
        .expect("positive total implies a positive channel"))
}

/// RK4 step of `dψ/dt = Kψ + ½(ψ†Γψ)ψ`.
fn rk4_frictional(psi: &CVec, k: &CMat, gamma: &CMat, dt: f64) -> CVec {
    let f = |p: &CVec| -> CVec {
        let t = p.dotc(&(gamma * p)).re;
        k * p + p * cr(0.5 * t)
    };
    let k1 = f(psi);
    let k2 = f(&(psi + &k1 * cr(0.5 * dt)));
    let k3 = f(&(psi + &k2 * cr(0.5 * dt)));
    let k4 = f(&(psi + &k3 * cr(dt)));
    psi + (k1 + (k2 + k3) * cr(2.0) + k4) * cr(dt / 6.0)
}

/// `T_α(x', x) = ‖L̂_α(x', x)ψ‖²` for the model as given.
pub fn jump_rates(psi: &CVec, x: usize, model: &DiscreteModel) -> JumpRates {
    let mut channels = Vec::new();
    for (a, g) in model.generators.iter().enumerate() {
        for e in g.entries.iter().filter(|e| e.from == x) {
            channels.push(Channel {
                alpha: a,
                to: e.to,
                rate: (&e.op * psi).norm_squared(),
            });
        }
    }
    let total = channels.iter().map(|c| c.rate).sum();
    JumpRates { channels, total }
}

/// One RK4 step of the norm-restored frictional flow at fixed x, followed by
/// renormalization.
pub fn drift_step(psi: &CVec, x: usize, model: &DiscreteModel, dt: f64) -> Result<CVec> {
    let fr = FrictionalH::new(model, x);
    let k = &model.h[x] * (-I) + &fr.minus_i_h_fr;
    let gamma = &fr.minus_i_h_fr * cr(-2.0);
    let total = psi.dotc(&(&gamma * psi)).re;
    if total * dt > 0.1 {
        log::warn!("jump probability per step {:.3} exceeds 0.1", total * dt);
    }
    let out = rk4_frictional(psi, &k, &gamma, dt);
    let n = out.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::NonFinite { t: f64::NAN });
    }
    Ok(out / cr(n))
}

/// Choose a channel with probability `T_α(x',x)/T(x)` and apply it. Returns
/// `(alpha, x', ψ')`.
pub fn sample_and_apply_jump<R: Rng + ?Sized>(
    psi: &CVec,
    x: usize,
    model: &DiscreteModel,
    rates: &JumpRates,
    rng: &mut R,
) -> Result<(usize, usize, CVec)> {
    let ch = choose_channel(rates, rng)?;
    let op = model.generators[ch.alpha]
        .get(ch.to, x)
        .ok_or_else(|| Error::InvalidArgument("rates do not match the model".into()))?;
    let mut out = op * psi * cr(1.0 / ch.rate.sqrt());
    out.normalize_mut();
    Ok((ch.alpha, ch.to, out))
}

/// Simulate one trajectory from `(x0, ψ0)`. Equal RNG state gives an
/// identical trajectory.
pub fn simulate_jump_trajectory<R: Rng + ?Sized>(
    x0: usize,
    psi0: &CVec,
    stepper: &JumpStepper,
    opts: &JumpOptions,
    rng: &mut R,
) -> Result<JumpTrajectory> {
    let (n, dt) = step_plan(opts.t_end, opts.dt)?;
    let every = opts.sample_every.max(1);
    let mut psi = psi0.normalize();
    let mut x = x0;
    let mut samples = vec![JumpSample {
        t: 0.0,
        x,
        psi: psi.clone(),
        jumps_so_far: 0,
    }];
    let mut jumps = Vec::new();
    let mut warned = false;
    for k in 1..=n {
        let t = k as f64 * dt;
        if !warned {
            let ell = stepper.shifts(&psi, x);
            let total = stepper.rates_shifted(&psi, x, &ell).total;
            if total * dt > 0.1 {
                log::warn!(
                    "jump probability per step {:.3} exceeds 0.1 at t = {t}",
                    total * dt
                );
                warned = true;
            }
        }
        let from = x;
        match stepper.step(&mut psi, &mut x, dt, rng) {
            Ok(Some((alpha, to))) => jumps.push(JumpEvent { t, alpha, from, to }),
            Ok(None) => {}
            Err(Error::NonFinite { .. }) => return Err(Error::NonFinite { t }),
            Err(e) => return Err(e),
        }
        if k % every == 0 || k == n {
            samples.push(JumpSample {
                t,
                x,
                psi: psi.clone(),
                jumps_so_far: jumps.len(),
            });
        }
    }
    Ok(JumpTrajectory { samples, jumps })
}

/// `M` trajectories on per-index RNG streams of `master_seed`, in index order.
pub fn run_jump_ensemble(
    x0: usize,
    psi0: &CVec,
    model: &DiscreteModel,
    opts: &JumpOptions,
    master_seed: u64,
    first_index: u64,
    m: usize,
) -> Result<Vec<JumpTrajectory>> {
    let stepper = JumpStepper::new(model, opts.normalization);
    par_trajectories(m, master_seed, |k, _| {
        let mut rng = crate::rng::trajectory_rng(master_seed, first_index + k as u64);
        simulate_jump_trajectory(x0, psi0, &stepper, opts, &mut rng)
    })
}

/// Ensemble mean of `ψψ†δ(z, x)` with per-entry standard errors (real and
/// imaginary parts reported separately in the re/im of `stderr`).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEstimate {
    pub mean: HybridStateDiscrete,
    pub stderr: Vec<CMat>,
    pub n_trajectories: usize,
}

/// Estimate at sample index `k` of every trajectory.
pub fn ensemble_estimate(
    trajs: &[JumpTrajectory],
    k: usize,
    points: &[Point],
    dim: usize,
) -> Result<EnsembleEstimate> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one trajectory".into(),
        ));
    }
    let np = points.len();
    let m = trajs.len() as f64;
    let mut sum = vec![CMat::zeros(dim, dim); np];
    let mut sq_re = vec![crate::linalg::RMat::zeros(dim, dim); np];
    let mut sq_im = vec![crate::linalg::RMat::zeros(dim, dim); np];
    for tr in trajs {
        let s = tr
            .samples
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory has no sample {k}")))?;
        let p = &s.psi * s.psi.adjoint();
        sum[s.x] += &p;
        sq_re[s.x] += p.map(|z| z.re * z.re);
        sq_im[s.x] += p.map(|z| z.im * z.im);
    }
    let mut stderr = Vec::with_capacity(np);
    let mut mean = Vec::with_capacity(np);
    for x in 0..np {
        let mu = &sum[x] / cr(m);
        let se = CMat::from_fn(dim, dim, |i, j| {
            let var_re = (sq_re[x][(i, j)] / m - mu[(i, j)].re.powi(2)).max(0.0);
            let var_im = (sq_im[x][(i, j)] / m - mu[(i, j)].im.powi(2)).max(0.0);
            let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            C64::new((var_re * corr / m).sqrt(), (var_im * corr / m).sqrt())
        });
        mean.push(mu);
        stderr.push(se);
    }
    Ok(EnsembleEstimate {
        mean: HybridStateDiscrete::new(points.to_vec(), mean)?,
        stderr,
        n_trajectories: trajs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis, c, max_abs, pauli, sigma_minus};
    use crate::model::Generator;
    use crate::rng::trajectory_rng;

    fn one_point(l: CMat, h: CMat) -> DiscreteModel {
        DiscreteModel::new(
            vec![Point::scalar(0)],
            vec![h],
            vec![Generator::new(vec![Generator::entry(0, 0, l)])],
        )
        .unwrap()
    }

    fn plus() -> CVec {
        (basis(2, 0) + basis(2, 1)) * cr(0.5f64.sqrt())
    }

    #[test]
    fn rate_examples() {
        let m = one_point(sigma_minus(), CMat::zeros(2, 2));
        assert!((jump_rates(&basis(2, 0), 0, &m).total - 1.0).abs() < 1e-15);
        assert_eq!(jump_rates(&basis(2, 1), 0, &m).total, 0.0);
        let two = DiscreteModel::new(
            vec![Point::scalar(0), Point::scalar(1)],
            vec![CMat::zeros(2, 2); 2],
            vec![Generator::new(vec![Generator::entry(
                1,
                0,
                CMat::identity(2, 2) * cr(2f64.sqrt()),
            )])],
        )
        .unwrap();
        let psi = (basis(2, 0) * c(0.3, 0.4) + basis(2, 1) * c(0.0, 0.866)).normalize();
        assert!((jump_rates(&psi, 0, &two).total - 2.0).abs() < 1e-14);
        assert!(FrictionalH::new(&m, 0)
            .minus_i_h_fr
            .symmetric_eigenvalues()
            .iter()
            .all(|&v| v <= 0.0));
    }

    #[test]
    fn drift_without_generators_is_unitary() {
        let [s1, _, _] = pauli();
        let m = DiscreteModel::new(vec![Point::scalar(0)], vec![s1.clone()], vec![]).unwrap();
        let mut psi = basis(2, 0);
        for _ in 0..1000 {
            psi = drift_step(&psi, 0, &m, 1e-3).unwrap();
        }
        // exp(−iσ₁t)|0⟩ = cos t|0⟩ − i sin t|1⟩.
        let exact = basis(2, 0) * cr(1f64.cos()) + basis(2, 1) * c(0.0, -(1f64.sin()));
        assert!(max_abs(&(psi - exact)) < 1e-10);
    }

    #[test]
    fn drift_matches_reference_flow() {
        // Conditional no-jump evolution under σ₋: ψ ∝ (e^{−t/2}|0⟩ + |1⟩)/√2.
        let m = one_point(sigma_minus(), CMat::zeros(2, 2));
        let mut psi = plus();
        let dt = 1e-3;
        for _ in 0..1000 {
            psi = drift_step(&psi, 0, &m, dt).unwrap();
        }
        let exact = (basis(2, 0) * cr((-0.5f64).exp()) + basis(2, 1)).normalize();
        assert!(max_abs(&(psi - exact)) < 1e-10);
        assert!((drift_step(&basis(2, 1), 0, &m, 0.1).unwrap() - basis(2, 1)).norm() < 1e-15);
    }

    #[test]
    fn jump_examples() {
        let m = one_point(sigma_minus(), CMat::zeros(2, 2));
        let mut rng = trajectory_rng(1, 0);
        let r = jump_rates(&plus(), 0, &m);
        let (a, to, psi) = sample_and_apply_jump(&plus(), 0, &m, &r, &mut rng).unwrap();
        assert_eq!((a, to), (0, 0));
        assert!((psi - basis(2, 1)).norm() < 1e-15);
        let r0 = jump_rates(&basis(2, 1), 0, &m);
        assert!(matches!(
            sample_and_apply_jump(&basis(2, 1), 0, &m, &r0, &mut rng),
            Err(Error::ZeroTotalRate)
        ));
    }

    #[test]
    fn channel_selection_frequencies() {
        let pts = vec![Point::scalar(0), Point::scalar(1), Point::scalar(2)];
        let m = DiscreteModel::new(
            pts,
            vec![CMat::zeros(1, 1); 3],
            vec![
                Generator::new(vec![Generator::entry(1, 0, CMat::identity(1, 1))]),
                Generator::new(vec![Generator::entry(
                    2,
                    0,
                    CMat::identity(1, 1) * cr(3f64.sqrt()),
                )]),
            ],
        )
        .unwrap();
        let psi = basis(1, 0);
        let r = jump_rates(&psi, 0, &m);
        let mut rng = trajectory_rng(11, 0);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_and_apply_jump(&psi, 0, &m, &r, &mut rng).unwrap().1 == 1)
            .count() as f64;
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.25).abs() < 3.0 * sigma);
    }

    #[test]
    fn waiting_times_are_exponential() {
        let pts = vec![Point::scalar(0), Point::scalar(1)];
        let m = DiscreteModel::new(
            pts,
            vec![CMat::zeros(1, 1); 2],
            vec![Generator::new(vec![Generator::entry(
                1,
                0,
                CMat::identity(1, 1),
            )])],
        )
        .unwrap();
        let opts = JumpOptions {
            t_end: 10.0,
            dt: 5e-3,
            sample_every: usize::MAX,
            normalization: Normalization::Dynamic,
        };
        let trajs = run_jump_ensemble(0, &basis(1, 0), &m, &opts, 5, 0, 10_000).unwrap();
        // Censoring at t = 10 removes a fraction e^{-10} ≈ 5e-5: negligible.
        let times: Vec<f64> = trajs
            .iter()
            .filter_map(|t| t.jumps.first().map(|j| j.t))
            .collect();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let se = 1.0 / (times.len() as f64).sqrt();
        // The Bernoulli scheme adds a bias of dt/2 to the first-jump time.
        assert!((mean - 1.0).abs() < 3.0 * se + opts.dt, "mean {mean}");
        // Survival at t = 1 matches e^{-1}.
        let surv = times.iter().filter(|&&t| t > 1.0).count() as f64 / times.len() as f64;
        let e = (-1.0f64).exp();
        assert!((surv - e).abs() < 3.0 * (e * (1.0 - e) / times.len() as f64).sqrt() + opts.dt);
    }

    #[test]
    fn zero_generators_never_jump() {
        let [_, _, s3] = pauli();
        let m = DiscreteModel::new(vec![Point::scalar(0)], vec![s3], vec![]).unwrap();
        let opts = JumpOptions {
            t_end: 1.0,
            dt: 1e-2,
            sample_every: 10,
            normalization: Normalization::Dynamic,
        };
        let tr = simulate_jump_trajectory(
            0,
            &plus(),
            &JumpStepper::new(&m, Normalization::Dynamic),
            &opts,
            &mut trajectory_rng(0, 0),
        )
        .unwrap();
        assert!(tr.jumps.is_empty());
        let last = tr.samples.last().unwrap();
        let exact = (basis(2, 0) * (-I).exp() + basis(2, 1) * I.exp()) * cr(0.5f64.sqrt());
        assert!(max_abs(&(&last.psi - exact)) < 1e-8);
    }

    #[test]
    fn replay_is_deterministic() {
        let m = one_point(sigma_minus(), pauli()[0].clone());
        let opts = JumpOptions {
            t_end: 2.0,
            dt: 1e-3,
            sample_every: 100,
            normalization: Normalization::Dynamic,
        };
        let a = run_jump_ensemble(0, &basis(2, 0), &m, &opts, 42, 0, 8).unwrap();
        let b = run_jump_ensemble(0, &basis(2, 0), &m, &opts, 42, 0, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic_normalization_is_gauge_invariant() {
        let [s1, _, s3] = pauli();
        let l = &s3 + sigma_minus() * c(0.5, 0.2);
        let m = one_point(l, s1 * cr(0.3));
        let shifted = gauge_shift_discrete(&m, &[vec![c(0.7, -1.1)]]).unwrap();
        let opts = JumpOptions {
            t_end: 1.0,
            dt: 1e-3,
            sample_every: 100,
            normalization: Normalization::Dynamic,
        };
        let a = run_jump_ensemble(0, &plus(), &m, &opts, 3, 0, 16).unwrap();
        let b = run_jump_ensemble(0, &plus(), &shifted, &opts, 3, 0, 16).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.jumps.len(), tb.jumps.len());
            for (sa, sb) in ta.samples.iter().zip(&tb.samples) {
                // Equal up to a global phase.
                let overlap = sa.psi.dotc(&sb.psi).norm();
                assert!((overlap - 1.0).abs() < 1e-9);
            }
        }
        // In raw mode the two models give different processes.
        let raw = JumpOptions {
            normalization: Normalization::Raw,
            ..opts
        };
        let a = run_jump_ensemble(0, &plus(), &m, &raw, 3, 0, 16).unwrap();
        let b = run_jump_ensemble(0, &plus(), &shifted, &raw, 3, 0, 16).unwrap();
        assert_ne!(
            a.iter().map(|t| t.jumps.len()).collect::<Vec<_>>(),
            b.iter().map(|t| t.jumps.len()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn static_normalization_zeroes_reference_expectation() {
        let [_, _, s3] = pauli();
        let m = one_point(
            &s3 + CMat::identity(2, 2) * cr(0.0) + sigma_minus(),
            CMat::zeros(2, 2),
        );
        let n = normalize_generators(&m, &basis(2, 0)).unwrap();
        assert!(expect(&n.diagonal(0, 0), &basis(2, 0)).norm() < 1e-15);
        let off = DiscreteModel::new(
            vec![Point::scalar(0), Point::scalar(1)],
            vec![CMat::zeros(1, 1); 2],
            vec![Generator::new(vec![Generator::entry(
                1,
                0,
                CMat::identity(1, 1),
            )])],
        )
        .unwrap();
        assert_eq!(normalize_generators(&off, &basis(1, 0)).unwrap(), off);
    }

    #[test]
    fn ensemble_estimate_examples() {
        let pts = vec![Point::scalar(0), Point::scalar(1)];
        let mk = |x: usize| JumpTrajectory {
            samples: vec![JumpSample {
                t: 0.0,
                x,
                psi: basis(2, 0),
                jumps_so_far: 0,
            }],
            jumps: vec![],
        };
        let e = ensemble_estimate(&[mk(0)], 0, &pts, 2).unwrap();
        assert_eq!(
            e.mean,
            HybridStateDiscrete::pure(pts.clone(), 0, &basis(2, 0))
        );
        let e = ensemble_estimate(&[mk(0), mk(1)], 0, &pts, 2).unwrap();
        assert_eq!(e.mean.blocks[0][(0, 0)].re, 0.5);
        assert_eq!(e.mean.blocks[1][(0, 0)].re, 0.5);
        assert!(ensemble_estimate(&[], 0, &pts, 2).is_err());
    }
}
