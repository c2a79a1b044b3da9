//! Ready-made models: the two-level diffusive model on a circle, canonical
//! hybrids (including a quantum oscillator coupled to a classical one) and a
//! small jump model on three sites.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::linalg::{
    c, cr, hermitian_asymmetry, pauli, sigma_minus, to_complex, CMat, RMat, RVec, I,
};
use crate::model::{
    canonical_backaction, minimum_noise_dc, scalar, symplectic, DiffusiveModel, DiscreteModel,
    Generator, TOL_RANK,
};
use crate::state::{Bloch, Grid, HybridStateGrid, Point};

/// `σ̂₃ρ̂σ̂₃ − ρ̂ + G{σ̂₃, ρ̂′} + ½ρ̂″`: `L̂ = σ̂₃`, `D_Q = D_C = 1`, `𝒢 = G`,
/// on the circle `[0, 2π)`. Admissible iff `G² ≤ 1`; not enforced here.
pub fn build_two_level(g: f64) -> Result<DiffusiveModel> {
    let [_, _, s3] = pauli();
    DiffusiveModel::constant(
        CMat::zeros(2, 2),
        vec![s3],
        scalar(1.0),
        RMat::from_element(1, 1, 1.0),
        scalar(g),
        RVec::zeros(1),
    )
}

pub fn circle_grid(n: usize) -> Result<Grid> {
    Grid::periodic_1d(n, 0.0, 2.0 * PI)
}

/// Bloch vector of the circle ansatz, `s(x) = (cos x, 0, sin x)`.
pub fn circle_bloch(x: f64) -> [f64; 3] {
    [x.cos(), 0.0, x.sin()]
}

/// A pure state with Bloch vector `circle_bloch(x)`.
pub fn circle_psi(x: f64) -> crate::linalg::CVec {
    let theta = x.sin().clamp(-1.0, 1.0).acos();
    let sign = if x.cos() >= 0.0 { 1.0 } else { -1.0 };
    crate::linalg::CVec::from_vec(vec![
        cr((theta / 2.0).cos()),
        cr(sign * (theta / 2.0).sin()),
    ])
}

/// Uniform classical density with the circle ansatz as conditional state.
pub fn circle_state(grid: &Grid) -> Result<HybridStateGrid> {
    HybridStateGrid::from_fn(grid.clone(), |x| {
        Bloch {
            weight: 1.0 / (2.0 * PI),
            s: circle_bloch(x[0]),
        }
        .to_matrix()
    })
}

/// `ds²/dt` at `|s| = 1` for the circle ansatz: `−4cos²x − 4G cos x − 1`.
pub fn bloch_rate_on_circle(g: f64, x: f64) -> f64 {
    let cx = x.cos();
    -4.0 * cx * cx - 4.0 * g * cx - 1.0
}

/// Maximum of [`bloch_rate_on_circle`] over x and a maximizer.
/// Equals `G² − 1` at `cos x = −G/2` when `|G| ≤ 2`.
pub fn max_bloch_rate_on_circle(g: f64) -> (f64, f64) {
    let c0 = (-g / 2.0).clamp(-1.0, 1.0);
    let x = c0.acos();
    (-4.0 * c0 * c0 - 4.0 * g * c0 - 1.0, x)
}

/// How the diffusion matrix of a canonical model is chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CanonicalNoise {
    /// `D_C = 𝒢 D_Q⁺ 𝒢ᵀ`.
    #[default]
    MinimumNoise,
    Given(RMat),
}

/// A hybrid with canonical classical phase space `x = (q, p)`:
///
/// ```text
/// Ĥ(x)  = Ĥ_Q + H_Cl(x) + h^α(x) L̂_α
/// H_Cl  = ½ xᵀ A x + bᵀ x
/// h^α   = c^α + Σ_n K[n][α] x^n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSpec {
    pub h_q: CMat,
    pub h_cl_quadratic: RMat,
    pub h_cl_linear: RVec,
    pub l: Vec<CMat>,
    pub coupling_offset: RVec,
    pub coupling_gradient: RMat,
    pub dq: CMat,
    pub noise: CanonicalNoise,
}

/// Diffusive model with `V = ε∇H_Cl`, `𝒢 = −½ε∇h` and the requested noise.
/// `H_Cl` is proportional to the identity and drops out of the commutator.
pub fn build_canonical(spec: &CanonicalSpec) -> Result<DiffusiveModel> {
    let n = spec.h_cl_quadratic.nrows();
    let a = spec.l.len();
    let eps = symplectic(n)?;
    if spec.h_cl_quadratic.ncols() != n
        || spec.h_cl_linear.len() != n
        || spec.coupling_offset.len() != a
        || spec.coupling_gradient.shape() != (n, a)
        || spec.dq.shape() != (a, a)
    {
        return Err(Error::ShapeMismatch(
            "canonical model dimensions disagree".into(),
        ));
    }
    for (k, l) in spec.l.iter().enumerate() {
        let asym = hermitian_asymmetry(l);
        if asym > 1e-12 {
            return Err(Error::NonHermitianInput {
                what: format!("coupling operator {k}"),
                asymmetry: asym,
            });
        }
    }
    check_independent(&spec.l)?;
    if (&spec.h_cl_quadratic - spec.h_cl_quadratic.transpose()).amax() > 1e-12 {
        return Err(Error::InvalidArgument(
            "classical Hamiltonian matrix must be symmetric".into(),
        ));
    }
    let coupling = |coef: &dyn Fn(usize) -> f64| {
        spec.l.iter().enumerate().fold(
            CMat::zeros(spec.h_q.nrows(), spec.h_q.nrows()),
            |acc, (k, l)| acc + l * cr(coef(k)),
        )
    };
    let h = Field::Affine {
        constant: &spec.h_q + coupling(&|k| spec.coupling_offset[k]),
        slopes: (0..n)
            .map(|m| coupling(&|k| spec.coupling_gradient[(m, k)]))
            .collect(),
    };
    let v = Field::Affine {
        constant: &eps * &spec.h_cl_linear,
        slopes: (0..n)
            .map(|m| &eps * spec.h_cl_quadratic.column(m))
            .collect(),
    };
    let g = to_complex(&canonical_backaction(&spec.coupling_gradient)?);
    let dc = match &spec.noise {
        CanonicalNoise::MinimumNoise => minimum_noise_dc(&spec.dq, &g, TOL_RANK)?,
        CanonicalNoise::Given(dc) => dc.clone(),
    };
    DiffusiveModel::new(
        None,
        h,
        spec.l.iter().cloned().map(Field::Const).collect(),
        Field::Const(spec.dq.clone()),
        Field::Const(dc),
        Field::Const(g),
        v,
    )
}

fn check_independent(l: &[CMat]) -> Result<()> {
    let Some(first) = l.first() else {
        return Ok(());
    };
    let d = first.nrows();
    let mut cols = vec![CMat::identity(d, d)];
    cols.extend(l.iter().cloned());
    let m = CMat::from_fn(d * d, cols.len(), |i, j| cols[j][(i / d, i % d)]);
    let gram = m.adjoint() * &m;
    let rank = crate::linalg::HermitianEigen::new(&gram).rank(TOL_RANK);
    if rank < cols.len() {
        return Err(Error::DependentGenerators {
            rank,
            expected: cols.len(),
        });
    }
    Ok(())
}

/// Truncated position and momentum on levels `0..n_max`:
/// `Q̂ = (â + â†)/√2`, `P̂ = i(↠− â)/√2`.
pub fn truncate_oscillator(n_max: usize) -> Result<(CMat, CMat)> {
    if n_max < 2 {
        return Err(Error::InvalidArgument(format!(
            "oscillator truncation needs n_max >= 2, got {n_max}"
        )));
    }
    let mut a = CMat::zeros(n_max, n_max);
    for k in 1..n_max {
        a[(k - 1, k)] = cr((k as f64).sqrt());
    }
    let ad = a.adjoint();
    let s = cr(std::f64::consts::FRAC_1_SQRT_2);
    Ok(((&a + &ad) * s, (ad - a) * I * s))
}

/// Quantum oscillator coupled to a classical one through `g(qQ̂ + pP̂)`,
/// `D_Q = diag(dq, dq)` and minimum-noise `D_C = (g²/4dq)·I`.
pub fn build_oscillator(g: f64, dq: f64, n_max: usize) -> Result<DiffusiveModel> {
    let (q, p) = truncate_oscillator(n_max)?;
    let h_q = (&q * &q + &p * &p) * cr(0.5);
    build_canonical(&CanonicalSpec {
        h_q,
        h_cl_quadratic: RMat::identity(2, 2),
        h_cl_linear: RVec::zeros(2),
        l: vec![q, p],
        coupling_offset: RVec::zeros(2),
        coupling_gradient: RMat::identity(2, 2) * g,
        dq: CMat::identity(2, 2) * cr(dq),
        noise: CanonicalNoise::MinimumNoise,
    })
}

/// Two-level system on three sites with one generator per neighbouring pair,
/// hopping both ways, and a site-dependent Hamiltonian.
pub fn build_jump_chain() -> Result<DiscreteModel> {
    let [s1, _, s3] = pauli();
    let sm = sigma_minus();
    let sp = sm.adjoint();
    let one = CMat::identity(2, 2);
    let points = (0..3).map(Point::scalar).collect();
    let h = (0..3)
        .map(|x| &s3 * cr(0.5 + 0.25 * x as f64) + &s1 * cr(0.4))
        .collect();
    let g01 = Generator::new(vec![
        Generator::entry(1, 0, &sm * cr(0.9) + &one * cr(0.3)),
        Generator::entry(0, 1, &sp * cr(0.6) + &s3 * cr(0.25)),
    ]);
    let g12 = Generator::new(vec![
        Generator::entry(2, 1, &s1 * cr(0.7) + &one * cr(0.2)),
        Generator::entry(1, 2, &sm * c(0.5, 0.2) + &one * cr(0.4)),
    ]);
    DiscreteModel::new(points, h, vec![g01, g12])
}

/// Models addressable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Preset {
    TwoLevel { g: f64 },
    Oscillator { g: f64, dq: f64, n_max: usize },
    JumpChain,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PresetModel {
    Discrete(DiscreteModel),
    Diffusive(DiffusiveModel),
}

pub const DEFAULT_N_MAX: usize = 20;

impl Preset {
    pub fn build(&self) -> Result<PresetModel> {
        Ok(match *self {
            Preset::TwoLevel { g } => PresetModel::Diffusive(build_two_level(g)?),
            Preset::Oscillator { g, dq, n_max } => {
                PresetModel::Diffusive(build_oscillator(g, dq, n_max)?)
            }
            Preset::JumpChain => PresetModel::Discrete(build_jump_chain()?),
        })
    }
}

/// `two-level:G=<v>`, `oscillator:g=<v>,dq=<v>[,n_max=<k>]`, `jump-chain`.
impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = Vec::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("preset argument '{part}' is not key=value"))
            })?;
            let v: f64 = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("preset argument '{part}' is not a number"))
            })?;
            kv.push((k.trim().to_string(), v));
        }
        let take = |key: &str, default: Option<f64>| -> Result<f64> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|&(_, v)| v)
                .or(default)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("preset '{name}' needs {key}=<value>"))
                })
        };
        let known: &[&str] = match name.trim() {
            "two-level" => &["G"],
            "oscillator" => &["g", "dq", "n_max"],
            "jump-chain" => &[],
            other => return Err(Error::InvalidArgument(format!("unknown preset '{other}'"))),
        };
        if let Some((k, _)) = kv.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "preset '{name}' has no parameter '{k}'"
            )));
        }
        Ok(match name.trim() {
            "two-level" => Preset::TwoLevel {
                g: take("G", None)?,
            },
            "oscillator" => {
                let n_max = take("n_max", Some(DEFAULT_N_MAX as f64))?;
                if n_max.fract() != 0.0 || n_max < 2.0 {
                    return Err(Error::InvalidArgument(format!(
                        "n_max must be an integer >= 2, got {n_max}"
                    )));
                }
                Preset::Oscillator {
                    g: take("g", None)?,
                    dq: take("dq", None)?,
                    n_max: n_max as usize,
                }
            }
            _ => Preset::JumpChain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{commutator, max_abs};
    use crate::model::{check_minimum_noise, validate_block};
    use crate::state::Tolerances;

    #[test]
    fn two_level_admissibility() {
        for &(g, ok) in &[(0.0, true), (0.5, true), (1.0, true), (1.2, false)] {
            let m = build_two_level(g).unwrap();
            let v = m.validate(&Tolerances::default()).unwrap();
            assert_eq!(v.admissible, ok, "G = {g}");
        }
        let loc = build_two_level(1.0).unwrap().at_point(&[0.0]).unwrap();
        let r = validate_block(&loc.dq, &loc.dc, &loc.g, TOL_RANK, &Tolerances::default()).unwrap();
        assert_eq!(r.rank_block, 1);
        assert!(r.minimum_noise);
    }

    #[test]
    fn bloch_rate_examples() {
        assert!((bloch_rate_on_circle(0.0, PI / 2.0) + 1.0).abs() < 1e-15);
        let (m, x) = max_bloch_rate_on_circle(1.0);
        assert!(m.abs() < 1e-15);
        assert!((x.cos() + 0.5).abs() < 1e-15);
        let x = (-0.6f64).acos();
        assert!((bloch_rate_on_circle(1.2, x) - 0.44).abs() < 1e-14);
        // Dense scan never beats the analytic maximum.
        for &g in &[0.0, 0.3, 1.0, 1.2, -0.7] {
            let (m, _) = max_bloch_rate_on_circle(g);
            assert!((m - (g * g - 1.0)).abs() < 1e-12);
            let scan = (0..10_000)
                .map(|k| bloch_rate_on_circle(g, 2.0 * PI * k as f64 / 10_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(scan <= m + 1e-12 && scan >= m - 1e-6);
        }
    }

    #[test]
    fn oscillator_truncation() {
        let (q, p) = truncate_oscillator(2).unwrap();
        let [s1, s2, _] = pauli();
        assert!(max_abs(&(&q - &s1 * cr(std::f64::consts::FRAC_1_SQRT_2))) < 1e-15);
        assert!(max_abs(&(&p - &s2 * cr(std::f64::consts::FRAC_1_SQRT_2))) < 1e-15);
        for n in [2, 5, 20] {
            let (q, p) = truncate_oscillator(n).unwrap();
            assert!(hermitian_asymmetry(&q) < 1e-15 && hermitian_asymmetry(&p) < 1e-15);
            let comm = commutator(&q, &p);
            let block = comm.view((0, 0), (n - 1, n - 1)).into_owned();
            assert!(max_abs(&(block - CMat::identity(n - 1, n - 1) * I)) < 1e-12);
        }
        assert!(truncate_oscillator(1).is_err());
    }

    #[test]
    fn oscillator_presets() {
        let m = build_oscillator(2.0, 1.0, 6).unwrap();
        let loc = m.at_point(&[0.3, -0.2]).unwrap();
        assert_eq!(loc.dc, RMat::identity(2, 2));
        let g = loc.g.map(|z| z.re);
        assert_eq!(g, RMat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        assert!(
            check_minimum_noise(&loc.dq, &loc.dc, &loc.g, TOL_RANK, &Tolerances::default())
                .unwrap()
                .ok
        );
        // V = (p, −q).
        assert!((loc.v[0] + 0.2).abs() < 1e-15 && (loc.v[1] + 0.3).abs() < 1e-15);

        let m = build_oscillator(2.0, 2.0, 6).unwrap();
        let dc = m.at_point(&[0.0, 0.0]).unwrap().dc;
        assert!((dc - RMat::identity(2, 2) * 0.5).amax() < 1e-15);

        let loc = build_oscillator(0.0, 1.0, 4)
            .unwrap()
            .at_point(&[1.0, 1.0])
            .unwrap();
        assert_eq!(max_abs(&loc.g), 0.0);
        assert_eq!(loc.dc.amax(), 0.0);
    }

    #[test]
    fn canonical_rank_deficiency() {
        let (q, p) = truncate_oscillator(4).unwrap();
        let spec = CanonicalSpec {
            h_q: CMat::zeros(4, 4),
            h_cl_quadratic: RMat::identity(2, 2),
            h_cl_linear: RVec::zeros(2),
            l: vec![q, p],
            coupling_offset: RVec::zeros(2),
            coupling_gradient: RMat::identity(2, 2),
            dq: CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![cr(1.0), cr(0.0)])),
            noise: CanonicalNoise::MinimumNoise,
        };
        assert!(matches!(
            build_canonical(&spec),
            Err(Error::RankDeficiency(_))
        ));
    }

    #[test]
    fn canonical_rejects_dependent_or_nonhermitian() {
        let (q, _) = truncate_oscillator(3).unwrap();
        let mut spec = CanonicalSpec {
            h_q: CMat::zeros(3, 3),
            h_cl_quadratic: RMat::identity(2, 2),
            h_cl_linear: RVec::zeros(2),
            l: vec![q.clone(), &q * cr(2.0)],
            coupling_offset: RVec::zeros(2),
            coupling_gradient: RMat::identity(2, 2),
            dq: CMat::identity(2, 2),
            noise: CanonicalNoise::MinimumNoise,
        };
        assert!(matches!(
            build_canonical(&spec),
            Err(Error::DependentGenerators { .. })
        ));
        spec.l = vec![q.clone(), &q * I];
        assert!(matches!(
            build_canonical(&spec),
            Err(Error::NonHermitianInput { .. })
        ));
    }

    #[test]
    fn jump_chain_is_valid() {
        let m = build_jump_chain().unwrap();
        assert_eq!(m.points.len(), 3);
        assert_eq!(m.generators.len(), 2);
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(
            "two-level:G=0.8".parse::<Preset>().unwrap(),
            Preset::TwoLevel { g: 0.8 }
        );
        assert_eq!(
            "oscillator:g=2,dq=1".parse::<Preset>().unwrap(),
            Preset::Oscillator {
                g: 2.0,
                dq: 1.0,
                n_max: DEFAULT_N_MAX
            }
        );
        assert_eq!("jump-chain".parse::<Preset>().unwrap(), Preset::JumpChain);
        assert!("two-level".parse::<Preset>().is_err());
        assert!("two-level:G=x".parse::<Preset>().is_err());
        assert!("two-level:G=1,h=2".parse::<Preset>().is_err());
        assert!("three-level:G=1".parse::<Preset>().is_err());
        assert!("oscillator:g=1,dq=1,n_max=1.5".parse::<Preset>().is_err());
    }

    #[test]
    fn circle_psi_has_circle_bloch_vector() {
        for k in 0..50 {
            let x = 2.0 * PI * k as f64 / 50.0;
            let psi = circle_psi(x);
            let rho = &psi * psi.adjoint();
            let expected = Bloch {
                weight: 1.0,
                s: circle_bloch(x),
            }
            .to_matrix();
            assert!(max_abs(&(rho - expected)) < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn circle_state_is_pure_everywhere() {
        let st = circle_state(&circle_grid(16).unwrap()).unwrap();
        for b in &st.blocks {
            let t = crate::linalg::trace(b).re;
            let purity = crate::linalg::trace(&(b * b)).re / (t * t);
            assert!((purity - 1.0).abs() < 1e-14);
        }
    }
}
