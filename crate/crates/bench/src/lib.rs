//! Fixtures shared by the benchmarks.

use hybridsim_core::diffusive_unravel::DiffusiveOptions;
use hybridsim_core::jump::{JumpOptions, Normalization};
use hybridsim_core::linalg::{basis, CVec};
use hybridsim_core::models::{circle_grid, circle_state};
use hybridsim_core::state::{HybridStateDiscrete, HybridStateGrid, TrajectoryState};

pub fn circle(n: usize) -> HybridStateGrid {
    circle_state(&circle_grid(n).unwrap()).unwrap()
}

pub fn chain_state(model: &hybridsim_core::model::DiscreteModel) -> HybridStateDiscrete {
    HybridStateDiscrete::pure(model.points.clone(), 0, &basis(2, 0))
}

pub fn plus_at(x: f64) -> TrajectoryState {
    let psi: CVec = (basis(2, 0) + basis(2, 1)) / hybridsim_core::linalg::cr(2f64.sqrt());
    TrajectoryState::pure_at_point(vec![x], psi)
}

pub fn jump_options(t_end: f64) -> JumpOptions {
    JumpOptions {
        t_end,
        dt: 1e-3,
        sample_every: 100,
        normalization: Normalization::Dynamic,
    }
}

pub fn diffusive_options(t_end: f64) -> DiffusiveOptions {
    DiffusiveOptions {
        t_end,
        dt: 1e-3,
        sample_every: 100,
        record_path: false,
    }
}
