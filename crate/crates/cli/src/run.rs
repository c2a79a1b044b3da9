//! Mode dispatch and artifact writing.
//!
//! All output files are assembled in memory and written at the end in name
//! order, followed by `manifest.json` listing a SHA-256 per file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use hybridsim_core::diffusive_hme::{integrate_grid, DiffusiveWorkspace};
use hybridsim_core::diffusive_unravel::{
    field_estimate, grid_estimate, replay, run_diffusive_ensemble, simulate_diffusive_trajectory,
    DiffusiveOptions, DiffusiveStepper, DiffusiveTrajectory, FieldEstimate,
};
use hybridsim_core::discrete_hme::integrate_discrete;
use hybridsim_core::integrate::step_plan;
use hybridsim_core::json::cmat_to_repr;
use hybridsim_core::jump::{ensemble_estimate, run_jump_ensemble, JumpOptions, JumpTrajectory};
use hybridsim_core::linalg::{basis, cr, pauli, trace, CMat, CVec};
use hybridsim_core::model::{DiffusiveModel, DiscreteModel};
use hybridsim_core::model_file::{load_model, LoadedModel};
use hybridsim_core::models::{circle_grid, circle_psi, circle_state, Preset, PresetModel};
use hybridsim_core::noise::{NoiseSpec, QuantumNoise, XiXiChoice};
use hybridsim_core::rng::{trajectory_rng, TrajectoryRng};
use hybridsim_core::state::{
    bloch_decompose, Boundary, Grid, HybridDensity, HybridStateDiscrete, HybridStateGrid,
    Tolerances, TrajectoryState,
};
use hybridsim_core::Error;

use crate::config::{parse_config_value, InitialSpec, Mode, ModelSource, RunConfig, SchemaError};

pub const DEFAULT_OUT_DIR: &str = "hybridsim-out";

#[derive(Debug, Clone, PartialEq)]
pub struct RunArgs {
    pub mode: Mode,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub allow_inadmissible: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum RunError {
    Schema(SchemaError),
    /// Model or parameter rejected.
    Validation(String),
    /// Non-finite state, CFL violation and the like.
    Numerical(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Schema(_) | RunError::Validation(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 4,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Schema(e) => write!(f, "{e}"),
            RunError::Validation(m) => write!(f, "validation error: {m}"),
            RunError::Numerical(m) => write!(f, "numerical error: {m}"),
            RunError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::CflViolation { .. } | Error::ZeroTotalRate => {
                RunError::Numerical(e.to_string())
            }
            other => RunError::Validation(other.to_string()),
        }
    }
}

impl From<SchemaError> for RunError {
    fn from(e: SchemaError) -> Self {
        RunError::Schema(e)
    }
}

type RunResult<T> = Result<T, RunError>;

/// Differences below this are rounding, not sampling error.
const FIELD_FLOOR: f64 = 1e-9;
/// Bins with fewer samples are left out of standardized deviations.
pub const MIN_BIN_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
}

/// Output files keyed by name.
#[derive(Debug, Default)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> RunResult<()> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.files.insert(name.to_string(), bytes);
        Ok(())
    }

    fn lines<T: Serialize>(&mut self, name: &str, rows: &[T]) -> RunResult<()> {
        let mut bytes = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut bytes, r).map_err(|e| RunError::Io(e.to_string()))?;
            bytes.push(b'\n');
        }
        self.files.insert(name.to_string(), bytes);
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Load the config, apply command-line overrides and parse.
pub fn load_config(args: &RunArgs) -> RunResult<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(&args.config).map_err(|e| io_err(&args.config, e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| SchemaError::single("", "config is not valid UTF-8"))?;
    let mut value: Value = serde_json::from_str(text)
        .map_err(|e| SchemaError::single("", format!("config is not valid JSON: {e}")))?;
    let Some(obj) = value.as_object_mut() else {
        return Err(SchemaError::single("", "config must be a JSON object").into());
    };
    match obj.get("mode") {
        None => {
            obj.insert("mode".into(), Value::String(args.mode.as_str().into()));
        }
        Some(Value::String(m)) if m == args.mode.as_str() => {}
        Some(other) => {
            return Err(SchemaError::single(
                "/mode",
                format!(
                    "config mode {other} conflicts with command-line mode {}",
                    args.mode
                ),
            )
            .into())
        }
    }
    if let Some(seed) = args.seed {
        let numerics = obj.entry("numerics").or_insert_with(|| json!({}));
        match numerics.as_object_mut() {
            Some(n) => {
                n.insert("master_seed".into(), json!(seed));
            }
            None => return Err(SchemaError::single("/numerics", "expected an object").into()),
        }
    }
    Ok((parse_config_value(&value)?, bytes))
}

enum Model {
    Discrete(DiscreteModel),
    Diffusive(DiffusiveModel),
}

fn load(cfg: &RunConfig, config_path: &Path) -> RunResult<(Model, Option<Preset>)> {
    match &cfg.model {
        ModelSource::Preset(p) => Ok((
            match p.build()? {
                PresetModel::Discrete(m) => Model::Discrete(m),
                PresetModel::Diffusive(m) => Model::Diffusive(m),
            },
            Some(p.clone()),
        )),
        ModelSource::File(f) => {
            let path = if f.is_relative() {
                config_path.parent().unwrap_or(Path::new(".")).join(f)
            } else {
                f.clone()
            };
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let model = match load_model(&text)? {
                LoadedModel::Discrete(m) => Model::Discrete(m),
                LoadedModel::Diffusive(m) => Model::Diffusive(m),
            };
            Ok((model, None))
        }
    }
}

pub fn run(args: &RunArgs) -> RunResult<RunOutcome> {
    let (cfg, config_bytes) = load_config(args)?;
    let (model, preset) = load(&cfg, &args.config)?;
    match (cfg.mode.wants_discrete(), &model) {
        (Some(true), Model::Diffusive(_)) => {
            return Err(SchemaError::single(
                "/model",
                format!("mode {} needs a discrete model", cfg.mode),
            )
            .into())
        }
        (Some(false), Model::Discrete(_)) => {
            return Err(SchemaError::single(
                "/model",
                format!("mode {} needs a diffusive model", cfg.mode),
            )
            .into())
        }
        _ => {}
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let mut art = Artifacts::default();
    let validation = validation_report(&cfg, &model)?;
    let admissible = validation["admissible"].as_bool().unwrap_or(false);
    art.json("validation.json", &validation)?;

    let exit_code = if !admissible && !args.allow_inadmissible {
        log::error!("model is not admissible; rerun with --allow-inadmissible to proceed anyway");
        2
    } else {
        if !admissible {
            log::warn!(
                "model is not admissible; continuing because --allow-inadmissible was given"
            );
        }
        let ctx = Ctx {
            cfg: &cfg,
            preset: preset.as_ref(),
        };
        match (&model, cfg.mode) {
            (_, Mode::Validate) => {}
            (Model::Discrete(m), Mode::HmeDiscrete) => hme_discrete(&ctx, m, &mut art)?,
            (Model::Discrete(m), Mode::UnravelJump) => unravel_jump(&ctx, m, &mut art)?,
            (Model::Diffusive(m), Mode::HmeGrid) => hme_grid(&ctx, m, &mut art)?,
            (Model::Diffusive(m), Mode::UnravelDiffusive) => {
                unravel_diffusive(&ctx, m, false, &mut art)?
            }
            (Model::Diffusive(m), Mode::UnravelMonitored) => {
                unravel_diffusive(&ctx, m, true, &mut art)?
            }
            _ => unreachable!("mode/model kind checked above"),
        }
        0
    };

    write_outputs(&out_dir, &cfg, &config_bytes, exit_code, art)
}

fn write_outputs(
    out_dir: &Path,
    cfg: &RunConfig,
    config_bytes: &[u8],
    exit_code: i32,
    art: Artifacts,
) -> RunResult<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &art.files {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        hashes.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = json!({
        "tool": "hybridsim",
        "versions": {
            "hybridsim-cli": env!("CARGO_PKG_VERSION"),
            "hybridsim-core": hybridsim_core::VERSION,
        },
        "mode": cfg.mode.as_str(),
        "config_sha256": sha256_hex(config_bytes),
        "master_seed": cfg.numerics.master_seed,
        "exit_code": exit_code,
        "files": hashes,
    });
    let mut bytes =
        serde_json::to_vec_pretty(&manifest).map_err(|e| RunError::Io(e.to_string()))?;
    bytes.push(b'\n');
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    let mut files: Vec<String> = art.files.into_keys().collect();
    files.push("manifest.json".into());
    Ok(RunOutcome {
        exit_code,
        out_dir: out_dir.to_path_buf(),
        files,
    })
}

fn validation_report(cfg: &RunConfig, model: &Model) -> RunResult<Value> {
    let tol = Tolerances::default();
    Ok(match model {
        Model::Discrete(m) => json!({
            "kind": "discrete",
            "admissible": true,
            "points": m.points.len(),
            "dim": m.dim,
            "generators": m.generators.len(),
        }),
        Model::Diffusive(m) => {
            let v = m.validate(&tol)?;
            let spec = NoiseSpec {
                xi_xi: cfg.noise.xi_xi.clone(),
                quantum: cfg.noise.quantum,
            };
            let noise = match DiffusiveStepper::new(m, spec) {
                Ok(_) => json!({"feasible": true}),
                Err(e) => json!({"feasible": false, "error": e.to_string()}),
            };
            let mut out = serde_json::to_value(&v).map_err(|e| RunError::Io(e.to_string()))?;
            if let Some(o) = out.as_object_mut() {
                o.insert("kind".into(), json!("diffusive"));
                o.insert("noise".into(), noise);
                if let Some(r) = &v.report {
                    o.insert("psd_ok".into(), json!(r.psd_ok));
                }
            }
            out
        }
    })
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    preset: Option<&'a Preset>,
}

impl Ctx<'_> {
    fn dt(&self) -> f64 {
        self.cfg.numerics.dt.expect("dt checked by the schema")
    }

    fn t_end(&self) -> f64 {
        self.cfg
            .numerics
            .t_end
            .expect("t_end checked by the schema")
    }

    fn seed(&self) -> u64 {
        self.cfg
            .numerics
            .master_seed
            .expect("seed checked by the schema")
    }

    fn n_traj(&self) -> usize {
        self.cfg
            .numerics
            .n_trajectories
            .expect("n_trajectories checked by the schema")
    }

    /// Steps between samples so that about `n_samples` points are recorded.
    fn sample_every(&self) -> RunResult<usize> {
        let (n, _) = step_plan(self.t_end(), self.dt())?;
        Ok((n / self.cfg.output.n_samples).max(1))
    }

    fn grid(&self, model: &DiffusiveModel) -> RunResult<Grid> {
        if let Some(g) = &self.cfg.numerics.grid {
            return Ok(g.to_grid()?);
        }
        match self.preset {
            Some(Preset::TwoLevel { .. }) => Ok(circle_grid(128)?),
            Some(Preset::Oscillator { .. }) => Ok(Grid::new(
                vec![29, 29],
                vec![-7.0, -7.0],
                vec![0.5, 0.5],
                Boundary::Absorbing,
            )?),
            _ => model.grid.clone().ok_or_else(|| {
                SchemaError::single("/numerics/grid", "this model needs a grid").into()
            }),
        }
    }

    fn diffusive_initial(&self, model: &DiffusiveModel) -> InitialSpec {
        if let Some(i) = &self.cfg.initial {
            return i.clone();
        }
        match self.preset {
            Some(Preset::TwoLevel { .. }) => InitialSpec::Circle,
            _ => {
                let mut center = vec![0.0; model.n_classical];
                if let Some(c) = center.first_mut() {
                    *c = 1.0;
                }
                InitialSpec::Gaussian {
                    center,
                    width: 1.0,
                    psi: None,
                }
            }
        }
    }
}

fn normalized(psi: &Option<CVec>, dim: usize, what: &str) -> RunResult<CVec> {
    let v = psi.clone().unwrap_or_else(|| basis(dim, 0));
    if v.len() != dim {
        return Err(SchemaError::single(
            what,
            format!("expected {dim} amplitudes, got {}", v.len()),
        )
        .into());
    }
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(SchemaError::single(what, "state vector has zero norm").into());
    }
    Ok(v / cr(n))
}

fn check_point(x: &[f64], n: usize, what: &str) -> RunResult<()> {
    if x.len() != n {
        return Err(SchemaError::single(
            what,
            format!("expected {n} coordinates, got {}", x.len()),
        )
        .into());
    }
    Ok(())
}

fn initial_site(ctx: &Ctx, model: &DiscreteModel) -> RunResult<(usize, CVec)> {
    let (site, psi) = match &ctx.cfg.initial {
        Some(InitialSpec::Site { site, psi }) => (*site, psi.clone()),
        _ => (0, None),
    };
    if site >= model.points.len() {
        return Err(SchemaError::single(
            "/initial/site",
            format!("site {site} out of range for {} points", model.points.len()),
        )
        .into());
    }
    Ok((site, normalized(&psi, model.dim, "/initial/psi")?))
}

fn marginal(blocks: &[CMat]) -> Vec<f64> {
    blocks.iter().map(|b| trace(b).re).collect()
}

fn conditional_purity(blocks: &[CMat], tol: &Tolerances) -> Vec<Option<f64>> {
    blocks
        .iter()
        .map(|b| {
            let w = trace(b).re;
            (w > tol.zero).then(|| trace(&(b * b)).re / (w * w))
        })
        .collect()
}

fn max_bloch_length(blocks: &[CMat], tol: &Tolerances) -> Option<f64> {
    if blocks.first().map(|b| b.nrows()) != Some(2) {
        return None;
    }
    Some(
        blocks
            .iter()
            .filter(|b| trace(b).re > tol.zero)
            .filter_map(|b| bloch_decompose(b, tol).ok())
            .map(|b| b.length())
            .fold(0.0, f64::max),
    )
}

fn hme_discrete(ctx: &Ctx, model: &DiscreteModel, art: &mut Artifacts) -> RunResult<()> {
    let tol = Tolerances::default();
    let (site, psi) = initial_site(ctx, model)?;
    let st = HybridStateDiscrete::pure(model.points.clone(), site, &psi);
    let every = ctx.sample_every()?;
    let run = integrate_discrete(
        &st,
        model,
        ctx.t_end(),
        ctx.dt(),
        ctx.cfg.numerics.scheme,
        every,
    )?;
    let mut rows = Vec::new();
    let mut drift = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for (t, s) in run.times.iter().zip(&run.states) {
        let tr = s.total_probability();
        drift = drift.max((tr - 1.0).abs());
        let e = s.min_block_eigenvalue();
        min_eig = min_eig.min(e);
        rows.push(
            json!({"t": t, "trace": tr, "marginal": marginal(&s.blocks), "min_eigenvalue": e}),
        );
    }
    art.lines("series.jsonl", &rows)?;
    let last = run.last().expect("at least the initial sample");
    art.json("final_state.json", last)?;
    art.json(
        "summary.json",
        &json!({
            "mode": ctx.cfg.mode.as_str(),
            "t_end": ctx.t_end(),
            "dt": ctx.dt(),
            "trace_drift_max": drift,
            "min_block_eigenvalue": min_eig,
            "final": {
                "marginal": marginal(&last.blocks),
                "conditional_purity": conditional_purity(&last.blocks, &tol),
            },
        }),
    )
}

/// Gaussian density in `x` (minimum-image distance on periodic grids) times `ρ̂`.
fn gaussian_state(
    grid: &Grid,
    center: &[f64],
    width: f64,
    rho: &CMat,
) -> RunResult<HybridStateGrid> {
    let periodic = grid.boundary == Boundary::Periodic;
    let st = HybridStateGrid::from_fn(grid.clone(), |x| {
        let r2: f64 = (0..x.len())
            .map(|a| {
                let mut d = x[a] - center[a];
                if periodic {
                    let len = grid.extent(a);
                    d -= len * (d / len).round();
                }
                d * d
            })
            .sum();
        rho * cr((-r2 / (2.0 * width * width)).exp())
    })?;
    let mass = st.total_probability();
    if !(mass > 0.0) {
        return Err(SchemaError::single("/initial", "initial density vanishes on the grid").into());
    }
    Ok(HybridStateGrid::new(
        grid.clone(),
        st.blocks.iter().map(|b| b / cr(mass)).collect(),
    )?)
}

fn grid_initial(
    init: &InitialSpec,
    grid: &Grid,
    model: &DiffusiveModel,
) -> RunResult<HybridStateGrid> {
    match init {
        InitialSpec::Circle => {
            check_circle(grid, model)?;
            Ok(circle_state(grid)?)
        }
        InitialSpec::Gaussian { center, width, psi } => {
            check_point(center, grid.ndim(), "/initial/center")?;
            let psi = normalized(psi, model.dim, "/initial/psi")?;
            gaussian_state(grid, center, *width, &(&psi * psi.adjoint()))
        }
        _ => Err(SchemaError::single(
            "/initial/type",
            "grid runs need a circle or gaussian initial density",
        )
        .into()),
    }
}

fn check_circle(grid: &Grid, model: &DiffusiveModel) -> RunResult<()> {
    if model.dim != 2 || grid.ndim() != 1 {
        return Err(SchemaError::single(
            "/initial/type",
            "circle initial state needs a two-level model on a 1-d grid",
        )
        .into());
    }
    Ok(())
}

fn hme_grid(ctx: &Ctx, model: &DiffusiveModel, art: &mut Artifacts) -> RunResult<()> {
    let tol = Tolerances::default();
    let grid = ctx.grid(model)?;
    let st = grid_initial(&ctx.diffusive_initial(model), &grid, model)?;
    let every = ctx.sample_every()?;
    let run = integrate_grid(
        &st,
        model,
        ctx.t_end(),
        ctx.dt(),
        ctx.cfg.numerics.scheme,
        every,
        ctx.cfg.numerics.cfl,
    )?;
    let mut rows = Vec::new();
    let mut drift = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut bloch_max: Option<f64> = None;
    for (t, s) in run.times.iter().zip(&run.states) {
        let tr = s.total_probability();
        drift = drift.max((tr - 1.0).abs());
        let e = s.min_block_eigenvalue();
        min_eig = min_eig.min(e);
        let b = max_bloch_length(&s.blocks, &tol);
        if let Some(b) = b {
            bloch_max = Some(bloch_max.map_or(b, |m| m.max(b)));
        }
        rows.push(json!({
            "t": t,
            "trace": tr,
            "min_eigenvalue": e,
            "max_bloch_length": b,
            "marginal": marginal(&s.blocks),
        }));
    }
    art.lines("series.jsonl", &rows)?;
    let last = run.last().expect("at least the initial sample");
    art.json("final_state.json", last)?;
    art.json(
        "summary.json",
        &json!({
            "mode": ctx.cfg.mode.as_str(),
            "t_end": ctx.t_end(),
            "dt": ctx.dt(),
            "grid": grid,
            "trace_drift_max": drift,
            "min_block_eigenvalue": min_eig,
            "max_bloch_length": bloch_max,
            "final": {
                "marginal": marginal(&last.blocks),
                "conditional_purity": conditional_purity(&last.blocks, &tol),
            },
        }),
    )
}

/// Mean and standard error.
fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let m = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Largest entrywise deviation and largest deviation in standard errors
/// (real and imaginary parts separately). Sites visited fewer than
/// `MIN_BIN_COUNT` times are left out of the latter.
fn deviation(mean: &[CMat], stderr: &[CMat], reference: &[CMat], counts: &[usize]) -> (f64, f64) {
    let mut dev = 0.0f64;
    let mut z = 0.0f64;
    for (((m, s), r), &n) in mean.iter().zip(stderr).zip(reference).zip(counts) {
        for ((mv, sv), rv) in m.iter().zip(s.iter()).zip(r.iter()) {
            let d = mv - rv;
            dev = dev.max(d.norm());
            if n < MIN_BIN_COUNT {
                continue;
            }
            for (di, si) in [(d.re.abs(), sv.re), (d.im.abs(), sv.im)] {
                if di > FIELD_FLOOR {
                    z = z.max(if si > 0.0 { di / si } else { f64::INFINITY });
                }
            }
        }
    }
    (dev, z)
}

fn unravel_jump(ctx: &Ctx, model: &DiscreteModel, art: &mut Artifacts) -> RunResult<()> {
    let tol = Tolerances::default();
    let (site, psi) = initial_site(ctx, model)?;
    let every = ctx.sample_every()?;
    let opts = JumpOptions {
        t_end: ctx.t_end(),
        dt: ctx.dt(),
        sample_every: every,
        normalization: ctx.cfg.numerics.normalization,
    };
    let m = ctx.n_traj();
    let trajs = run_jump_ensemble(site, &psi, model, &opts, ctx.seed(), 0, m)?;
    let st = HybridStateDiscrete::pure(model.points.clone(), site, &psi);
    let reference = integrate_discrete(
        &st,
        model,
        ctx.t_end(),
        ctx.dt(),
        ctx.cfg.numerics.scheme,
        every,
    )?;

    let n_samples = trajs[0].samples.len();
    let mut rows = Vec::new();
    let (mut dev_max, mut z_max, mut drift) = (0.0f64, 0.0f64, 0.0f64);
    let mut last_est = None;
    for k in 0..n_samples {
        let est = ensemble_estimate(&trajs, k, &model.points, model.dim)?;
        let r = &reference.states[k];
        drift = drift.max((r.total_probability() - 1.0).abs());
        let (p, p_se) = site_marginal(&trajs, k, model.points.len());
        let counts: Vec<usize> = p.iter().map(|p| (p * m as f64).round() as usize).collect();
        let (dev, z) = deviation(&est.mean.blocks, &est.stderr, &r.blocks, &counts);
        dev_max = dev_max.max(dev);
        z_max = z_max.max(z);
        rows.push(json!({
            "t": trajs[0].samples[k].t,
            "marginal": p,
            "marginal_se": p_se,
            "hme_marginal": marginal(&r.blocks),
            "max_deviation": dev,
            "max_z": z,
        }));
        last_est = Some(est);
    }
    art.lines("ensemble.jsonl", &rows)?;
    let est = last_est.expect("at least one sample");
    art.json(
        "final_state.json",
        &json!({
            "ensemble_mean": est.mean,
            "ensemble_stderr": est.stderr.iter().map(cmat_to_repr).collect::<Vec<_>>(),
            "hme": reference.last(),
        }),
    )?;
    let recorded: Vec<&JumpTrajectory> = trajs
        .iter()
        .take(ctx.cfg.output.record_trajectories)
        .collect();
    let rec_rows: Vec<Value> = recorded
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "samples": t.samples, "jumps": t.jumps}))
        .collect();
    art.lines("trajectories.jsonl", &rec_rows)?;
    let (jumps, jumps_se) = mean_se(trajs.iter().map(|t| t.jumps.len() as f64));
    let (p, p_se) = site_marginal(&trajs, n_samples - 1, model.points.len());
    art.json(
        "summary.json",
        &json!({
            "mode": ctx.cfg.mode.as_str(),
            "t_end": ctx.t_end(),
            "dt": ctx.dt(),
            "n_trajectories": m,
            "master_seed": ctx.seed(),
            "max_deviation_vs_hme": dev_max,
            "max_z_vs_hme": z_max,
            "hme_trace_drift_max": drift,
            "mean_jumps": jumps,
            "mean_jumps_se": jumps_se,
            "final": {
                "marginal": p,
                "marginal_se": p_se,
                "ensemble_conditional_purity": conditional_purity(&est.mean.blocks, &tol),
            },
        }),
    )
}

/// Identity, then the Pauli matrices for two-level systems.
fn field_observables(dim: usize) -> Vec<CMat> {
    let mut obs = vec![CMat::identity(dim, dim)];
    if dim == 2 {
        obs.extend(pauli());
    }
    obs
}

/// Worst absolute and standardized deviation of estimated fields from
/// `tr(Ô ρ̂_ref(x))`.
fn field_deviation(est: &FieldEstimate, observables: &[CMat], reference: &[CMat]) -> (f64, f64) {
    let (mut dev, mut z) = (0.0f64, 0.0f64);
    for (o, obs) in observables.iter().enumerate() {
        for (x, r) in reference.iter().enumerate() {
            let d = (est.mean[o][x] - trace(&(obs * r)).re).abs();
            dev = dev.max(d);
            // Rounding-level differences carry no statistical meaning, and
            // sparse bins have no reliable error estimate.
            if d <= FIELD_FLOOR || est.counts[x] < MIN_BIN_COUNT {
                continue;
            }
            let se = est.stderr[o][x];
            z = z.max(if se > 0.0 { d / se } else { f64::INFINITY });
        }
    }
    (dev, z)
}

fn site_marginal(trajs: &[JumpTrajectory], k: usize, n_points: usize) -> (Vec<f64>, Vec<f64>) {
    let m = trajs.len() as f64;
    let mut count = vec![0.0; n_points];
    for t in trajs {
        count[t.samples[k].x] += 1.0;
    }
    let p: Vec<f64> = count.iter().map(|c| c / m).collect();
    let se = p
        .iter()
        .map(|p| {
            if m > 1.0 {
                (p * (1.0 - p) / (m - 1.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (p, se)
}

/// Draws starting nodes from the marginal of a grid density, so that the
/// ensemble starts from the same discretized state as the grid reference.
struct NodeStart {
    grid: Grid,
    dist: WeightedIndex<f64>,
}

impl NodeStart {
    fn new(st: &HybridStateGrid) -> RunResult<Self> {
        let w: Vec<f64> = st.blocks.iter().map(|b| trace(b).re.max(0.0)).collect();
        let dist = WeightedIndex::new(&w)
            .map_err(|e| RunError::Validation(format!("initial density: {e}")))?;
        Ok(Self {
            grid: st.grid.clone(),
            dist,
        })
    }
}

fn sample_initial(
    init: &InitialSpec,
    start: Option<&NodeStart>,
    model: &DiffusiveModel,
    rng: &mut TrajectoryRng,
) -> TrajectoryState {
    if let Some(ns) = start {
        let x = ns.grid.coord(rng.sample(&ns.dist));
        let psi = match init {
            InitialSpec::Circle => circle_psi(x[0]),
            InitialSpec::Gaussian { psi, .. } => psi.clone().unwrap_or_else(|| basis(model.dim, 0)),
            _ => unreachable!("node starts only for densities"),
        };
        return TrajectoryState::pure_at_point(x, psi);
    }
    match init {
        InitialSpec::Circle => {
            let x = std::f64::consts::TAU * rng.random::<f64>();
            TrajectoryState::pure_at_point(vec![x], circle_psi(x))
        }
        InitialSpec::Gaussian { center, width, psi } => {
            let x: Vec<f64> = center
                .iter()
                .map(|c| c + width * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let psi = psi.clone().unwrap_or_else(|| basis(model.dim, 0));
            TrajectoryState::pure_at_point(x, psi)
        }
        InitialSpec::Point { x, psi } => TrajectoryState::pure_at_point(
            x.clone(),
            psi.clone().unwrap_or_else(|| basis(model.dim, 0)),
        ),
        InitialSpec::MixedPoint { x, sigma } => {
            TrajectoryState::mixed_at_point(x.clone(), sigma.clone())
        }
        InitialSpec::Site { .. } => unreachable!("rejected by the schema"),
    }
}

/// Check and normalize a diffusive initial spec.
fn checked_initial(init: InitialSpec, model: &DiffusiveModel) -> RunResult<InitialSpec> {
    let n = model.n_classical;
    Ok(match init {
        InitialSpec::Circle => {
            if model.dim != 2 || n != 1 {
                return Err(SchemaError::single(
                    "/initial/type",
                    "circle initial state needs a two-level model with one classical coordinate",
                )
                .into());
            }
            InitialSpec::Circle
        }
        InitialSpec::Gaussian { center, width, psi } => {
            check_point(&center, n, "/initial/center")?;
            let psi = Some(normalized(&psi, model.dim, "/initial/psi")?);
            InitialSpec::Gaussian { center, width, psi }
        }
        InitialSpec::Point { x, psi } => {
            check_point(&x, n, "/initial/x")?;
            let psi = Some(normalized(&psi, model.dim, "/initial/psi")?);
            InitialSpec::Point { x, psi }
        }
        InitialSpec::MixedPoint { x, sigma } => {
            check_point(&x, n, "/initial/x")?;
            if sigma.shape() != (model.dim, model.dim) {
                return Err(SchemaError::single(
                    "/initial/sigma",
                    format!("expected a {0}x{0} matrix", model.dim),
                )
                .into());
            }
            let tr = trace(&sigma).re;
            if !(tr > 0.0) {
                return Err(SchemaError::single("/initial/sigma", "trace must be positive").into());
            }
            InitialSpec::MixedPoint {
                x,
                sigma: sigma / cr(tr),
            }
        }
        InitialSpec::Site { .. } => {
            return Err(SchemaError::single(
                "/initial/type",
                "site initial state needs a discrete model",
            )
            .into())
        }
    })
}

fn unravel_diffusive(
    ctx: &Ctx,
    model: &DiffusiveModel,
    monitored: bool,
    art: &mut Artifacts,
) -> RunResult<()> {
    let spec = if monitored {
        NoiseSpec::monitored()
    } else {
        NoiseSpec {
            xi_xi: ctx.cfg.noise.xi_xi.clone(),
            quantum: ctx.cfg.noise.quantum,
        }
    };
    let stepper = DiffusiveStepper::new(model, spec)?;
    let init = checked_initial(ctx.diffusive_initial(model), model)?;
    let every = ctx.sample_every()?;
    let opts = DiffusiveOptions {
        t_end: ctx.t_end(),
        dt: ctx.dt(),
        sample_every: every,
        record_path: false,
    };
    let m = ctx.n_traj();
    let seed = ctx.seed();

    // Grid reference when the initial condition is a density.
    let grid = match init {
        InitialSpec::Circle | InitialSpec::Gaussian { .. } => Some(ctx.grid(model)?),
        _ => None,
    };
    let (reference, start) = match &grid {
        Some(g) => {
            let st = grid_initial(&init, g, model)?;
            let (n, h) = step_plan(ctx.t_end(), ctx.dt())?;
            let bound = DiffusiveWorkspace::new(g, model)?.cfl_bound(ctx.cfg.numerics.cfl);
            let r = if n == 0 {
                1
            } else {
                (h / bound).ceil().max(1.0) as usize
            };
            let run = integrate_grid(
                &st,
                model,
                ctx.t_end(),
                h / r as f64,
                ctx.cfg.numerics.scheme,
                every * r,
                ctx.cfg.numerics.cfl,
            )?;
            (Some(run), Some(NodeStart::new(&st)?))
        }
        None => (None, None),
    };
    let trajs = run_diffusive_ensemble(&stepper, &opts, seed, 0, m, |_, rng| {
        Ok(sample_initial(&init, start.as_ref(), model, rng))
    })?;
    let observables = field_observables(model.dim);

    let n_samples = trajs[0].samples.len();
    let mut rows = Vec::new();
    let (mut dev_max, mut z_max, mut drift, mut outside_max) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let mut norm_defect = 0.0f64;
    for k in 0..n_samples {
        let (purity, purity_se) = mean_se(trajs.iter().map(|t| t.samples[k].quantum.purity()));
        norm_defect = trajs
            .iter()
            .map(|t| t.samples[k].quantum.norm_defect())
            .fold(norm_defect, f64::max);
        let xs: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.samples[k].coords().expect("point").to_vec())
            .collect();
        let (mean_x, mean_x_se): (Vec<f64>, Vec<f64>) = (0..model.n_classical)
            .map(|a| mean_se(xs.iter().map(|x| x[a])))
            .unzip();
        let mut row = json!({
            "t": trajs[0].samples[k].t,
            "mean_x": mean_x,
            "mean_x_se": mean_x_se,
            "mean_purity": purity,
            "mean_purity_se": purity_se,
        });
        if let (Some(g), Some(r)) = (&grid, &reference) {
            let est = field_estimate(&trajs, k, g, &observables)?;
            let rs = &r.states[k];
            drift = drift.max((rs.total_probability() - 1.0).abs());
            let (dev, z) = field_deviation(&est, &observables, &rs.blocks);
            dev_max = dev_max.max(dev);
            z_max = z_max.max(z);
            outside_max = outside_max.max(est.outside);
            let o = row.as_object_mut().expect("object");
            o.insert("marginal".into(), json!(est.mean[0]));
            o.insert("marginal_se".into(), json!(est.stderr[0]));
            o.insert("hme_marginal".into(), json!(marginal(&rs.blocks)));
            o.insert("max_deviation".into(), json!(dev));
            o.insert("max_z".into(), json!(z));
            o.insert("outside".into(), json!(est.outside));
            o.insert(
                "sparse_bins".into(),
                json!(est.counts.iter().filter(|&&c| c < MIN_BIN_COUNT).count()),
            );
        }
        rows.push(row);
    }
    art.lines("ensemble.jsonl", &rows)?;

    let n_rec = ctx.cfg.output.record_trajectories.min(m);
    let rec_rows: Vec<Value> = trajs
        .iter()
        .take(n_rec)
        .enumerate()
        .map(|(i, t)| json!({"index": i, "samples": t.samples}))
        .collect();
    art.lines("trajectories.jsonl", &rec_rows)?;

    let last = n_samples - 1;
    let (purity, purity_se) = mean_se(trajs.iter().map(|t| t.samples[last].quantum.purity()));
    let xs: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| t.samples[last].coords().expect("point").to_vec())
        .collect();
    let (mean_x, mean_x_se): (Vec<f64>, Vec<f64>) = (0..model.n_classical)
        .map(|a| mean_se(xs.iter().map(|x| x[a])))
        .unzip();
    let mut summary = json!({
        "mode": ctx.cfg.mode.as_str(),
        "t_end": ctx.t_end(),
        "dt": ctx.dt(),
        "n_trajectories": m,
        "master_seed": seed,
        "noise": noise_json(stepper.spec()),
        "norm_defect_max": norm_defect,
        "final": {
            "mean_x": mean_x,
            "mean_x_se": mean_x_se,
            "mean_purity": purity,
            "mean_purity_se": purity_se,
        },
    });
    let o = summary.as_object_mut().expect("object");
    if let (Some(g), Some(r)) = (&grid, &reference) {
        let est = grid_estimate(&trajs, last, g, model.dim)?;
        o.insert("max_deviation_vs_hme".into(), json!(dev_max));
        o.insert("max_z_vs_hme".into(), json!(z_max));
        o.insert("hme_trace_drift_max".into(), json!(drift));
        o.insert("outside_grid_max".into(), json!(outside_max));
        art.json(
            "final_state.json",
            &json!({
                "ensemble_mean": est.mean,
                "ensemble_stderr": est.stderr.iter().map(cmat_to_repr).collect::<Vec<_>>(),
                "hme": r.last(),
            }),
        )?;
    }
    if monitored {
        o.insert(
            "replay".into(),
            replay_check(
                &stepper,
                &opts,
                &init,
                start.as_ref(),
                model,
                &trajs,
                seed,
                n_rec,
            )?,
        );
    }
    art.json("summary.json", &summary)
}

fn noise_json(spec: &NoiseSpec) -> Value {
    let xi_xi = match &spec.xi_xi {
        XiXiChoice::Zero => json!("zero"),
        XiXiChoice::Monitored => json!("monitored"),
        XiXiChoice::Custom(c) => json!({ "custom": cmat_to_repr(c) }),
    };
    let eta = match spec.quantum {
        QuantumNoise::Full => 1.0,
        QuantumNoise::Reduced(eta) => eta,
    };
    json!({"xi_xi": xi_xi, "eta": eta})
}

/// Re-simulate the first trajectories with their classical paths recorded and
/// reconstruct `ψ` from each path alone.
fn replay_check(
    stepper: &DiffusiveStepper,
    opts: &DiffusiveOptions,
    init: &InitialSpec,
    start: Option<&NodeStart>,
    model: &DiffusiveModel,
    trajs: &[DiffusiveTrajectory],
    seed: u64,
    n: usize,
) -> RunResult<Value> {
    let full = DiffusiveOptions {
        sample_every: 1,
        record_path: true,
        ..opts.clone()
    };
    let mut identical = true;
    let mut max_dev = 0.0f64;
    for (k, original) in trajs.iter().enumerate().take(n) {
        let mut rng = trajectory_rng(seed, k as u64);
        let s0 = sample_initial(init, start, model, &mut rng);
        let Some(psi0) = s0.psi().cloned() else {
            continue;
        };
        let tr = simulate_diffusive_trajectory(s0, stepper, &full, &mut rng)?;
        identical &= tr.samples.last() == original.samples.last();
        let psis = replay(model, &tr.path, &psi0, full_step(opts)?)?;
        for (s, p) in tr.samples.iter().zip(&psis) {
            let sp = s.psi().expect("pure");
            identical &= sp == p;
            max_dev = max_dev.max((sp - p).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Ok(json!({"trajectories": n, "bit_identical": identical, "max_deviation": max_dev}))
}

fn full_step(opts: &DiffusiveOptions) -> RunResult<f64> {
    Ok(step_plan(opts.t_end, opts.dt)?.1)
}
