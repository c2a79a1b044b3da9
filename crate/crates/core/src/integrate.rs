//! Fixed-step explicit integration of block-valued linear ODEs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, cr, CMat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Rk4,
    Euler,
}

/// States recorded at sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampled<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

impl<S> Sampled<S> {
    pub fn last(&self) -> Option<&S> {
        self.states.last()
    }
}

/// Step count and effective step: the largest step ≤ `dt` that lands on `t_end`.
pub fn step_plan(t_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and t_end >= 0, got dt = {dt}, t_end = {t_end}"
        )));
    }
    let n = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    Ok((n, if n == 0 { dt } else { t_end / n as f64 }))
}

/// Scratch buffers for one explicit step.
pub(crate) struct Stepper {
    k: [Vec<CMat>; 4],
    tmp: Vec<CMat>,
}

fn zeros_like(y: &[CMat]) -> Vec<CMat> {
    y.iter()
        .map(|b| CMat::zeros(b.nrows(), b.ncols()))
        .collect()
}

fn combine(out: &mut [CMat], y: &[CMat], a: f64, k: &[CMat]) {
    for ((o, yi), ki) in out.iter_mut().zip(y).zip(k) {
        o.copy_from(yi);
        *o += ki * cr(a);
    }
}

impl Stepper {
    pub fn new(y: &[CMat]) -> Self {
        Self {
            k: [zeros_like(y), zeros_like(y), zeros_like(y), zeros_like(y)],
            tmp: zeros_like(y),
        }
    }

    pub fn step<F>(&mut self, y: &mut [CMat], dt: f64, scheme: Scheme, rhs: &mut F) -> Result<()>
    where
        F: FnMut(&[CMat], &mut [CMat]) -> Result<()>,
    {
        match scheme {
            Scheme::Euler => {
                rhs(y, &mut self.k[0])?;
                for (yi, ki) in y.iter_mut().zip(&self.k[0]) {
                    *yi += ki * cr(dt);
                }
            }
            Scheme::Rk4 => {
                let [k1, k2, k3, k4] = &mut self.k;
                rhs(y, k1)?;
                combine(&mut self.tmp, y, 0.5 * dt, k1);
                rhs(&self.tmp, k2)?;
                combine(&mut self.tmp, y, 0.5 * dt, k2);
                rhs(&self.tmp, k3)?;
                combine(&mut self.tmp, y, dt, k3);
                rhs(&self.tmp, k4)?;
                let w = dt / 6.0;
                for i in 0..y.len() {
                    y[i] += (&k1[i] + (&k2[i] + &k3[i]) * cr(2.0) + &k4[i]) * cr(w);
                }
            }
        }
        Ok(())
    }
}

/// Integrate `dy/dt = rhs(y)` to `t_end`, recording every `sample_every` steps
/// and at the end.
pub(crate) fn integrate_blocks<F, S>(
    y0: Vec<CMat>,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    sample_every: usize,
    mut rhs: F,
    wrap: impl Fn(&[CMat]) -> S,
) -> Result<Sampled<S>>
where
    F: FnMut(&[CMat], &mut [CMat]) -> Result<()>,
{
    let (n, h) = step_plan(t_end, dt)?;
    let every = sample_every.max(1);
    let mut y = y0;
    let mut stepper = Stepper::new(&y);
    let mut out = Sampled {
        times: vec![0.0],
        states: vec![wrap(&y)],
    };
    for k in 1..=n {
        stepper.step(&mut y, h, scheme, &mut rhs)?;
        let t = k as f64 * h;
        if !y.iter().all(all_finite) {
            return Err(Error::NonFinite { t });
        }
        if k % every == 0 || k == n {
            out.times.push(t);
            out.states.push(wrap(&y));
        }
    }
    Ok(out)
}
