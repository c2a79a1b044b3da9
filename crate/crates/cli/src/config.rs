//! Run configuration: a JSON document validated in full, so that every schema
//! violation is reported with its JSON-pointer path.

use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{Map, Value};

use hybridsim_core::integrate::Scheme;
use hybridsim_core::json::{cmat_from_repr, cvec_from_repr, ComplexRepr, MatrixRepr};
use hybridsim_core::jump::Normalization;
use hybridsim_core::linalg::{CMat, CVec};
use hybridsim_core::models::Preset;
use hybridsim_core::noise::{QuantumNoise, XiXiChoice};
use hybridsim_core::state::{Boundary, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    HmeDiscrete,
    HmeGrid,
    UnravelJump,
    UnravelDiffusive,
    UnravelMonitored,
    Validate,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::HmeDiscrete,
        Mode::HmeGrid,
        Mode::UnravelJump,
        Mode::UnravelDiffusive,
        Mode::UnravelMonitored,
        Mode::Validate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::HmeDiscrete => "hme-discrete",
            Mode::HmeGrid => "hme-grid",
            Mode::UnravelJump => "unravel-jump",
            Mode::UnravelDiffusive => "unravel-diffusive",
            Mode::UnravelMonitored => "unravel-monitored",
            Mode::Validate => "validate",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Mode::UnravelJump | Mode::UnravelDiffusive | Mode::UnravelMonitored
        )
    }

    /// `Some(true)` for modes that need a discrete model, `Some(false)` for a
    /// diffusive one.
    pub fn wants_discrete(self) -> Option<bool> {
        match self {
            Mode::HmeDiscrete | Mode::UnravelJump => Some(true),
            Mode::HmeGrid | Mode::UnravelDiffusive | Mode::UnravelMonitored => Some(false),
            Mode::Validate => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Preset(Preset),
    /// Relative paths are resolved against the config file's directory.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub shape: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub boundary: Boundary,
}

impl GridSpec {
    /// Periodic axes cover `[lower, upper)`; absorbing axes include both ends.
    pub fn to_grid(&self) -> hybridsim_core::Result<Grid> {
        let spacing = (0..self.shape.len())
            .map(|a| {
                let n = self.shape[a] as f64;
                let len = self.upper[a] - self.lower[a];
                match self.boundary {
                    Boundary::Periodic => len / n,
                    Boundary::Absorbing => len / (n - 1.0).max(1.0),
                }
            })
            .collect();
        Grid::new(
            self.shape.clone(),
            self.lower.clone(),
            spacing,
            self.boundary,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialSpec {
    /// Discrete models: `ψ` at one site.
    Site { site: usize, psi: Option<CVec> },
    /// Two-level models on a circle: uniform `x`, Bloch vector `(cos x, 0, sin x)`.
    Circle,
    /// Gaussian classical density (per-axis width) with a fixed quantum state.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        psi: Option<CVec>,
    },
    /// All trajectories start at one point with a pure state.
    Point { x: Vec<f64>, psi: Option<CVec> },
    /// All trajectories start at one point with a mixed state.
    MixedPoint { x: Vec<f64>, sigma: CMat },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub scheme: Scheme,
    pub cfl: f64,
    pub n_trajectories: Option<usize>,
    pub master_seed: Option<u64>,
    pub grid: Option<GridSpec>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub xi_xi: XiXiChoice,
    pub quantum: QuantumNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
    /// Number of recorded time points after t = 0.
    pub n_samples: usize,
    /// Trajectories written out in full.
    pub record_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSource,
    pub mode: Mode,
    pub numerics: Numerics,
    pub noise: NoiseConfig,
    pub initial: Option<InitialSpec>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaIssue {
    pub pointer: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaError {
    pub issues: Vec<SchemaIssue>,
}

impl SchemaError {
    pub fn single(pointer: &str, message: impl Into<String>) -> Self {
        Self {
            issues: vec![SchemaIssue {
                pointer: pointer.into(),
                message: message.into(),
            }],
        }
    }

    pub fn has(&self, pointer: &str) -> bool {
        self.issues.iter().any(|i| i.pointer == pointer)
    }
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "invalid configuration ({} problem(s)):",
            self.issues.len()
        )?;
        for i in &self.issues {
            writeln!(
                f,
                "  {}: {}",
                if i.pointer.is_empty() {
                    "/"
                } else {
                    &i.pointer
                },
                i.message
            )?;
        }
        Ok(())
    }
}

impl std::error::Error for SchemaError {}

struct Checker {
    issues: Vec<SchemaIssue>,
}

fn child(path: &str, key: &str) -> String {
    format!("{path}/{}", key.replace('~', "~0").replace('/', "~1"))
}

impl Checker {
    fn err(&mut self, pointer: &str, message: impl Into<String>) {
        self.issues.push(SchemaIssue {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    fn object<'a>(
        &mut self,
        v: &'a Value,
        path: &str,
        allowed: &[&str],
    ) -> Option<&'a Map<String, Value>> {
        match v.as_object() {
            Some(m) => {
                for k in m.keys() {
                    if !allowed.contains(&k.as_str()) {
                        self.err(
                            &child(path, k),
                            format!("unknown key (allowed: {})", allowed.join(", ")),
                        );
                    }
                }
                Some(m)
            }
            None => {
                self.err(path, "expected an object");
                None
            }
        }
    }

    fn number(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<f64> {
        let p = child(path, key);
        match m.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Some(x),
                _ => {
                    self.err(&p, "expected a finite number");
                    None
                }
            },
        }
    }

    fn positive(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<f64> {
        let x = self.number(m, key, path)?;
        if x > 0.0 {
            Some(x)
        } else {
            self.err(&child(path, key), "must be positive");
            None
        }
    }

    fn unsigned(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<u64> {
        match m.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(x) => Some(x),
                None => {
                    self.err(&child(path, key), "expected a non-negative integer");
                    None
                }
            },
        }
    }

    fn string<'a>(&mut self, m: &'a Map<String, Value>, key: &str, path: &str) -> Option<&'a str> {
        match m.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_str() {
                Some(s) => Some(s),
                None => {
                    self.err(&child(path, key), "expected a string");
                    None
                }
            },
        }
    }

    fn reals(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<Vec<f64>> {
        let v = m.get(key)?;
        let p = child(path, key);
        match serde_json::from_value::<Vec<f64>>(v.clone()) {
            Ok(x) if x.iter().all(|z| z.is_finite()) => Some(x),
            _ => {
                self.err(&p, "expected an array of finite numbers");
                None
            }
        }
    }

    fn cvec(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<CVec> {
        let v = m.get(key)?;
        match serde_json::from_value::<Vec<ComplexRepr>>(v.clone()) {
            Ok(x) if !x.is_empty() => Some(cvec_from_repr(&x)),
            _ => {
                self.err(
                    &child(path, key),
                    "expected a non-empty array of [re, im] pairs",
                );
                None
            }
        }
    }

    fn cmat(&mut self, v: &Value, path: &str) -> Option<CMat> {
        let parsed = serde_json::from_value::<MatrixRepr>(v.clone())
            .map_err(|e| e.to_string())
            .and_then(|r| cmat_from_repr(&r));
        match parsed {
            Ok(x) if x.nrows() > 0 && x.nrows() == x.ncols() => Some(x),
            Ok(_) => {
                self.err(path, "expected a non-empty square matrix");
                None
            }
            Err(_) => {
                self.err(path, "expected a matrix of [re, im] pairs");
                None
            }
        }
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, SchemaError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| SchemaError::single("", format!("not valid JSON: {e}")))?;
    parse_config_value(&value)
}

pub fn parse_config_value(root: &Value) -> Result<RunConfig, SchemaError> {
    let mut c = Checker { issues: Vec::new() };
    let Some(top) = c.object(
        root,
        "",
        &["model", "mode", "numerics", "noise", "initial", "output"],
    ) else {
        return Err(SchemaError { issues: c.issues });
    };

    let mode = match top.get("mode") {
        None => {
            c.err("/mode", "missing");
            None
        }
        Some(v) => match v.as_str().and_then(Mode::parse) {
            Some(m) => Some(m),
            None => {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                c.err(
                    "/mode",
                    format!("unknown mode {v}; expected one of {}", names.join(", ")),
                );
                None
            }
        },
    };

    let model = match top.get("model") {
        None => {
            c.err("/model", "missing");
            None
        }
        Some(v) => parse_model(&mut c, v, mode),
    };

    let empty = Value::Object(Map::new());
    let numerics = parse_numerics(&mut c, top.get("numerics").unwrap_or(&empty), mode);
    let noise = parse_noise(&mut c, top.get("noise").unwrap_or(&empty), mode);
    let initial = top
        .get("initial")
        .and_then(|v| parse_initial(&mut c, v, "/initial"));
    let output = parse_output(&mut c, top.get("output").unwrap_or(&empty));

    if let (Some(m), Some(init)) = (mode, &initial) {
        let discrete_init = matches!(init, InitialSpec::Site { .. });
        if let Some(wants) = m.wants_discrete() {
            if wants != discrete_init {
                c.err(
                    "/initial/type",
                    format!("initial state type does not fit mode {m}"),
                );
            }
        }
        if m == Mode::HmeGrid
            && matches!(
                init,
                InitialSpec::Point { .. } | InitialSpec::MixedPoint { .. }
            )
        {
            c.err(
                "/initial/type",
                "grid runs need a density: use circle or gaussian",
            );
        }
        if m == Mode::UnravelMonitored && matches!(init, InitialSpec::MixedPoint { .. }) {
            c.err("/initial/type", "monitored unraveling needs pure states");
        }
    }

    match (model, mode, numerics, noise, output) {
        (Some(model), Some(mode), Some(numerics), Some(noise), Some(output))
            if c.issues.is_empty() =>
        {
            Ok(RunConfig {
                model,
                mode,
                numerics,
                noise,
                initial,
                output,
            })
        }
        _ => Err(SchemaError { issues: c.issues }),
    }
}

fn parse_model(c: &mut Checker, v: &Value, mode: Option<Mode>) -> Option<ModelSource> {
    if let Some(s) = v.as_str() {
        return match s.parse::<Preset>() {
            Ok(p) => {
                check_model_kind(c, &p, mode);
                Some(ModelSource::Preset(p))
            }
            Err(e) => {
                c.err("/model", e.to_string());
                None
            }
        };
    }
    let m = c.object(v, "/model", &["preset", "file"])?;
    match (
        c.string(m, "preset", "/model"),
        c.string(m, "file", "/model"),
    ) {
        (Some(p), None) => match p.parse::<Preset>() {
            Ok(p) => {
                check_model_kind(c, &p, mode);
                Some(ModelSource::Preset(p))
            }
            Err(e) => {
                c.err("/model/preset", e.to_string());
                None
            }
        },
        (None, Some(f)) => Some(ModelSource::File(PathBuf::from(f))),
        _ => {
            c.err("/model", "give exactly one of preset or file");
            None
        }
    }
}

fn check_model_kind(c: &mut Checker, p: &Preset, mode: Option<Mode>) {
    let discrete = matches!(p, Preset::JumpChain);
    if let Some(want) = mode.and_then(Mode::wants_discrete) {
        if want != discrete {
            c.err(
                "/model",
                format!(
                    "mode {} needs a {} model",
                    mode.unwrap(),
                    if want { "discrete" } else { "diffusive" }
                ),
            );
        }
    }
}

fn parse_numerics(c: &mut Checker, v: &Value, mode: Option<Mode>) -> Option<Numerics> {
    let p = "/numerics";
    let m = c.object(
        v,
        p,
        &[
            "dt",
            "t_end",
            "scheme",
            "cfl",
            "n_trajectories",
            "master_seed",
            "grid",
            "normalization",
        ],
    )?;
    let dt = c.positive(m, "dt", p);
    let t_end = c.number(m, "t_end", p);
    if let Some(t) = t_end {
        if t < 0.0 {
            c.err("/numerics/t_end", "must be non-negative");
        }
    }
    let scheme = match c.string(m, "scheme", p) {
        None => Scheme::Rk4,
        Some("rk4") => Scheme::Rk4,
        Some("euler") => Scheme::Euler,
        Some(other) => {
            c.err(
                "/numerics/scheme",
                format!("unknown scheme '{other}' (rk4 or euler)"),
            );
            Scheme::Rk4
        }
    };
    let cfl = c.positive(m, "cfl", p).unwrap_or(1.0);
    let n_trajectories = c.unsigned(m, "n_trajectories", p).map(|n| n as usize);
    if n_trajectories == Some(0) {
        c.err("/numerics/n_trajectories", "must be at least 1");
    }
    let master_seed = c.unsigned(m, "master_seed", p);
    let normalization = match c.string(m, "normalization", p) {
        None | Some("dynamic") => Normalization::Dynamic,
        Some("raw") => Normalization::Raw,
        Some(other) => {
            c.err(
                "/numerics/normalization",
                format!("unknown normalization '{other}' (dynamic or raw)"),
            );
            Normalization::Dynamic
        }
    };
    let grid = m.get("grid").and_then(|g| parse_grid(c, g));
    if let Some(mode) = mode {
        if mode != Mode::Validate {
            if dt.is_none() && !m.contains_key("dt") {
                c.err("/numerics/dt", "required");
            }
            if t_end.is_none() && !m.contains_key("t_end") {
                c.err("/numerics/t_end", "required");
            }
        }
        if mode.is_stochastic() {
            if master_seed.is_none() && !m.contains_key("master_seed") {
                c.err("/numerics/master_seed", "required for stochastic modes");
            }
            if n_trajectories.is_none() && !m.contains_key("n_trajectories") {
                c.err("/numerics/n_trajectories", "required for stochastic modes");
            }
        }
    }
    Some(Numerics {
        dt,
        t_end,
        scheme,
        cfl,
        n_trajectories,
        master_seed,
        grid,
        normalization,
    })
}

fn parse_grid(c: &mut Checker, v: &Value) -> Option<GridSpec> {
    let p = "/numerics/grid";
    let m = c.object(v, p, &["shape", "lower", "upper", "boundary"])?;
    let shape = match m
        .get("shape")
        .map(|s| serde_json::from_value::<Vec<usize>>(s.clone()))
    {
        Some(Ok(s)) if !s.is_empty() => Some(s),
        Some(_) => {
            c.err(
                "/numerics/grid/shape",
                "expected a non-empty array of node counts",
            );
            None
        }
        None => {
            c.err("/numerics/grid/shape", "required");
            None
        }
    };
    let lower = c.reals(m, "lower", p);
    let upper = c.reals(m, "upper", p);
    if lower.is_none() && !m.contains_key("lower") {
        c.err("/numerics/grid/lower", "required");
    }
    if upper.is_none() && !m.contains_key("upper") {
        c.err("/numerics/grid/upper", "required");
    }
    let boundary = match c.string(m, "boundary", p) {
        None | Some("periodic") => Boundary::Periodic,
        Some("absorbing") => Boundary::Absorbing,
        Some(other) => {
            c.err(
                "/numerics/grid/boundary",
                format!("unknown boundary '{other}' (periodic or absorbing)"),
            );
            Boundary::Periodic
        }
    };
    let (shape, lower, upper) = (shape?, lower?, upper?);
    if lower.len() != shape.len() || upper.len() != shape.len() {
        c.err(p, "shape, lower and upper must have the same length");
        return None;
    }
    if shape.iter().any(|&n| n < 3) {
        c.err("/numerics/grid/shape", "every axis needs at least 3 nodes");
    }
    if lower.iter().zip(&upper).any(|(l, u)| u <= l) {
        c.err("/numerics/grid/upper", "must exceed lower on every axis");
    }
    Some(GridSpec {
        shape,
        lower,
        upper,
        boundary,
    })
}

fn parse_noise(c: &mut Checker, v: &Value, mode: Option<Mode>) -> Option<NoiseConfig> {
    let p = "/noise";
    let m = c.object(v, p, &["xi_xi", "eta"])?;
    let xi_xi = match m.get("xi_xi") {
        None => None,
        Some(Value::String(s)) if s == "zero" => Some(XiXiChoice::Zero),
        Some(Value::String(s)) if s == "monitored" => Some(XiXiChoice::Monitored),
        Some(Value::Object(o)) if o.len() == 1 && o.contains_key("custom") => c
            .cmat(&o["custom"], "/noise/xi_xi/custom")
            .map(XiXiChoice::Custom),
        Some(_) => {
            c.err(
                "/noise/xi_xi",
                "expected \"zero\", \"monitored\" or {\"custom\": matrix}",
            );
            None
        }
    };
    let eta = c.number(m, "eta", p);
    let quantum = match eta {
        None => QuantumNoise::Full,
        Some(e) if e == 1.0 => QuantumNoise::Full,
        Some(e) if e > 0.0 && e < 1.0 => QuantumNoise::Reduced(e),
        Some(_) => {
            c.err("/noise/eta", "must lie in (0, 1]");
            QuantumNoise::Full
        }
    };
    let xi_xi = match (mode, xi_xi) {
        (Some(Mode::UnravelMonitored), None) => XiXiChoice::Monitored,
        (Some(Mode::UnravelMonitored), Some(XiXiChoice::Monitored)) => XiXiChoice::Monitored,
        (Some(Mode::UnravelMonitored), Some(_)) => {
            c.err("/noise/xi_xi", "unravel-monitored uses monitored noise");
            XiXiChoice::Monitored
        }
        (_, x) => x.unwrap_or_default(),
    };
    Some(NoiseConfig { xi_xi, quantum })
}

fn parse_initial(c: &mut Checker, v: &Value, p: &str) -> Option<InitialSpec> {
    let m = c.object(
        v,
        p,
        &["type", "site", "psi", "center", "width", "x", "sigma"],
    )?;
    let Some(kind) = c.string(m, "type", p) else {
        c.err(
            &child(p, "type"),
            "required (site, circle, gaussian, point or mixed_point)",
        );
        return None;
    };
    let allowed: &[&str] = match kind {
        "site" => &["type", "site", "psi"],
        "circle" => &["type"],
        "gaussian" => &["type", "center", "width", "psi"],
        "point" => &["type", "x", "psi"],
        "mixed_point" => &["type", "x", "sigma"],
        other => {
            c.err(
                &child(p, "type"),
                format!("unknown initial state type '{other}'"),
            );
            return None;
        }
    };
    for k in m.keys() {
        if !allowed.contains(&k.as_str()) {
            c.err(
                &child(p, k),
                format!("not used by initial state type '{kind}'"),
            );
        }
    }
    let psi = c.cvec(m, "psi", p);
    let required = |c: &mut Checker, key: &str| {
        if !m.contains_key(key) {
            c.err(&child(p, key), "required");
        }
    };
    match kind {
        "site" => Some(InitialSpec::Site {
            site: c.unsigned(m, "site", p).unwrap_or(0) as usize,
            psi,
        }),
        "circle" => Some(InitialSpec::Circle),
        "gaussian" => {
            required(c, "center");
            required(c, "width");
            let center = c.reals(m, "center", p)?;
            let width = c.positive(m, "width", p)?;
            Some(InitialSpec::Gaussian { center, width, psi })
        }
        "point" => {
            required(c, "x");
            Some(InitialSpec::Point {
                x: c.reals(m, "x", p)?,
                psi,
            })
        }
        _ => {
            required(c, "x");
            required(c, "sigma");
            let x = c.reals(m, "x", p);
            let sigma = m.get("sigma").and_then(|s| c.cmat(s, &child(p, "sigma")));
            Some(InitialSpec::MixedPoint {
                x: x?,
                sigma: sigma?,
            })
        }
    }
}

fn parse_output(c: &mut Checker, v: &Value) -> Option<OutputConfig> {
    let p = "/output";
    let m = c.object(v, p, &["directory", "n_samples", "record_trajectories"])?;
    let directory = c.string(m, "directory", p).map(PathBuf::from);
    let n_samples = c.unsigned(m, "n_samples", p).unwrap_or(10) as usize;
    if n_samples == 0 {
        c.err("/output/n_samples", "must be at least 1");
    }
    let record_trajectories = c.unsigned(m, "record_trajectories", p).unwrap_or(4) as usize;
    Some(OutputConfig {
        directory,
        n_samples,
        record_trajectories,
    })
}
