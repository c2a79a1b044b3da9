//! Correlated Gaussian increments `(dξ, dW)` for diffusive unravelings.
//!
//! Conventions: `E[dξ̄^α dξ^β] = D^{αβ} dt` where D is the target quantum noise
//! matrix (D_Q for full noise), so `E[dξ dξ†] = D̄ dt`; `E[dW^n dξ^α] = 𝒢^{nα} dt`;
//! `E[dW dWᵀ] = D_C dt`. The free correlation `C = E[dξ dξᵀ]/dt` is chosen by
//! [`XiXiChoice`]. With `dξ = a + ib` the real covariance over `(a, b, W)` is
//!
//! ```text
//! E[aaᵀ] = Re(P + C)/2   E[bbᵀ] = Re(P − C)/2   E[abᵀ] = (Im C − Im P)/2
//! E[Waᵀ] = Re 𝒢          E[Wbᵀ] = Im 𝒢          E[WWᵀ] = D_C
//! ```
//!
//! with `P = D̄`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::linalg::{c, cr, fro, max_abs, to_complex, CMat, CVec, RMat, RVec};
use crate::model::{pseudo_inverse_real, TOL_RANK};

/// Choice of `E[dξ dξᵀ]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiXiChoice {
    /// `dξ dξ = 0` (quantum-state-diffusion convention).
    #[default]
    Zero,
    /// `dξ = F̄ dW`: the quantum noise is a linear function of the classical one.
    Monitored,
    /// A given complex symmetric A×A matrix.
    Custom(#[serde(with = "json::cmat")] CMat),
}

/// Which quantum noise strength the unraveling uses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantumNoise {
    /// `dξ dξ† ↔ D_Q`.
    #[default]
    Full,
    /// `dξ dξ† ↔ η·𝒢†D_C⁺𝒢`, η ∈ (0, 1].
    Reduced(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub xi_xi: XiXiChoice,
    #[serde(default)]
    pub quantum: QuantumNoise,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monitored() -> Self {
        Self {
            xi_xi: XiXiChoice::Monitored,
            quantum: QuantumNoise::Full,
        }
    }

    pub fn custom(c: CMat) -> Self {
        Self {
            xi_xi: XiXiChoice::Custom(c),
            quantum: QuantumNoise::Full,
        }
    }

    /// Target quantum noise matrix for the given coefficients.
    pub fn target(&self, dq: &CMat, dc: &RMat, g: &CMat) -> Result<CMat> {
        match self.quantum {
            QuantumNoise::Full => Ok(dq.clone()),
            QuantumNoise::Reduced(eta) => {
                if !(eta > 0.0 && eta <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "eta must lie in (0, 1], got {eta}"
                    )));
                }
                Ok(Fqc::new(dc, g)?.dq_min(g) * cr(eta))
            }
        }
    }
}

/// `F = 𝒢†D_C⁺` (A×N), so that `F D_C = 𝒢†` on the range of `D_C`.
/// Monitored noise is `dξ = F̄ dW`, i.e. `dξ̄ = F dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fqc {
    pub f: CMat,
}

impl Fqc {
    pub fn new(dc: &RMat, g: &CMat) -> Result<Self> {
        let dcp = pseudo_inverse_real(dc, TOL_RANK)?;
        Ok(Self {
            f: g.adjoint() * to_complex(&dcp),
        })
    }

    /// `𝒢†D_C⁺𝒢`.
    pub fn dq_min(&self, g: &CMat) -> CMat {
        &self.f * g
    }

    /// `dξ = F̄ dW`.
    pub fn xi(&self, dw: &RVec) -> CVec {
        self.f.map(|z| z.conj()) * dw.map(cr)
    }
}

/// Real covariance of `(Re dξ, Im dξ, dW)` per unit time and its factor.
#[derive(Debug, Clone)]
pub struct NoiseCovariance {
    pub sigma: RMat,
    /// `S` with `S Sᵀ = Σ` (negative eigenvalues within tolerance clamped).
    pub factor: RMat,
    pub a: usize,
    pub n: usize,
    pub min_eig: f64,
    /// Set for monitored noise: `dξ` is computed from `dW`.
    pub monitored: Option<Fqc>,
}

/// Assemble and verify `Σ`. `dq_target` is in the D_Q index convention.
pub fn build_noise_covariance(
    dq_target: &CMat,
    dc: &RMat,
    g: &CMat,
    choice: &XiXiChoice,
) -> Result<NoiseCovariance> {
    let a = dq_target.nrows();
    let n = dc.nrows();
    if dq_target.ncols() != a || dc.ncols() != n || g.shape() != (n, a) {
        return Err(Error::ShapeMismatch("need D AxA, D_C NxN, G NxA".into()));
    }
    let p = dq_target.map(|z| z.conj());
    let mut monitored = None;
    let cmat = match choice {
        XiXiChoice::Zero => CMat::zeros(a, a),
        XiXiChoice::Custom(cm) => {
            if cm.shape() != (a, a) {
                return Err(Error::ShapeMismatch(
                    "custom dxi-dxi matrix must be AxA".into(),
                ));
            }
            if max_abs(&(cm - cm.transpose())) > 1e-12 * max_abs(cm).max(1.0) {
                return Err(Error::InvalidArgument(
                    "custom dxi-dxi matrix must be symmetric".into(),
                ));
            }
            cm.clone()
        }
        XiXiChoice::Monitored => {
            let f = Fqc::new(dc, g)?;
            let fb = f.f.map(|z| z.conj());
            // dξ = F̄ dW: E[ξξᵀ] = F̄ D_C F̄ᵀ.
            let cm = &fb * to_complex(dc) * fb.transpose();
            let pm = &fb * to_complex(dc) * f.f.transpose();
            let resid = fro(&(&pm - &p));
            if resid > 1e-8 * max_abs(&p).max(1.0) {
                return Err(Error::MonitoringInfeasible { residual: resid });
            }
            monitored = Some(f);
            cm
        }
    };
    let mut sigma = RMat::zeros(2 * a + n, 2 * a + n);
    for i in 0..a {
        for j in 0..a {
            sigma[(i, j)] = 0.5 * (p[(i, j)].re + cmat[(i, j)].re);
            sigma[(a + i, a + j)] = 0.5 * (p[(i, j)].re - cmat[(i, j)].re);
            let ab = 0.5 * (cmat[(i, j)].im - p[(i, j)].im);
            sigma[(i, a + j)] = ab;
            sigma[(a + j, i)] = ab;
        }
    }
    for k in 0..n {
        for i in 0..a {
            sigma[(2 * a + k, i)] = g[(k, i)].re;
            sigma[(i, 2 * a + k)] = g[(k, i)].re;
            sigma[(2 * a + k, a + i)] = g[(k, i)].im;
            sigma[(a + i, 2 * a + k)] = g[(k, i)].im;
        }
        for l in 0..n {
            sigma[(2 * a + k, 2 * a + l)] = dc[(k, l)];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(sigma.clone());
    let scale = sigma.amax().max(1.0);
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-9 * scale {
        let (minor, minor_det) = worst_minor(&sigma);
        return Err(Error::InfeasibleNoiseChoice {
            min_eig,
            minor,
            minor_det,
        });
    }
    let dim = sigma.nrows();
    let mut factor = eig.eigenvectors.clone();
    for k in 0..dim {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        factor.column_mut(k).scale_mut(s);
    }
    Ok(NoiseCovariance {
        sigma,
        factor,
        a,
        n,
        min_eig,
        monitored,
    })
}

/// Most negative 2×2 principal minor of `m`.
fn worst_minor(m: &RMat) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::INFINITY);
    for i in 0..m.nrows() {
        if m[(i, i)] < best.1 {
            best = ((i, i), m[(i, i)]);
        }
        for j in i + 1..m.nrows() {
            let d = m[(i, i)] * m[(j, j)] - m[(i, j)] * m[(j, i)];
            if d < best.1 {
                best = ((i, j), d);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseIncrement {
    #[serde(with = "json::rvec")]
    pub dw: RVec,
    #[serde(with = "json::cvec")]
    pub dxi: CVec,
}

impl NoiseCovariance {
    pub fn sample<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> NoiseIncrement {
        let dim = self.sigma.nrows();
        let z = RVec::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v = &self.factor * z * dt.sqrt();
        let dw = RVec::from_iterator(self.n, (0..self.n).map(|k| v[2 * self.a + k]));
        let dxi = match &self.monitored {
            Some(f) => f.xi(&dw),
            None => CVec::from_iterator(self.a, (0..self.a).map(|i| c(v[i], v[self.a + i]))),
        };
        NoiseIncrement { dw, dxi }
    }
}

/// Zero-mean increments with covariance `Σ·dt`.
pub fn sample_increments<R: Rng + ?Sized>(
    cov: &NoiseCovariance,
    dt: f64,
    rng: &mut R,
) -> NoiseIncrement {
    cov.sample(dt, rng)
}

/// `dξ = F̄ dW`, failing when the monitoring condition `D_Q = 𝒢†D_C⁺𝒢` does not hold.
pub fn monitored_xi(dw: &RVec, dq: &CMat, dc: &RMat, g: &CMat) -> Result<CVec> {
    let f = Fqc::new(dc, g)?;
    let resid = fro(&(dq - f.dq_min(g)));
    if resid > 1e-8 * max_abs(dq).max(1.0) {
        return Err(Error::MonitoringInfeasible { residual: resid });
    }
    Ok(f.xi(dw))
}
