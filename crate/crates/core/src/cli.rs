//! Command-line front end: TOML experiment configs, JSON reports, field and CSV
//! side files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coords::{build_harmonic_coords_with, build_qharmonic_coords_with, ChartOptions};
use crate::energy::OperatorParams;
use crate::error::{QlabError, Result};
use crate::grid::{gauge_ball_mask, Grid, ScalarField};
use crate::heis::{koranyi_gauge, popp_step2, Point, Polynomial, SubRiemannianMetric};
use crate::qcdiag::{ball_grid, capacity_options, capacity_with, condition_battery, modulus_ring_report, ring_condenser, MapSpec};
use crate::solver::{continuation_sweep, solve_plaplacian_with, Init, SolverOptions};

pub const FORMAT_VERSION: &str = "qlab-report v1";

const CONFIG_HELP: &str = "\
Configuration file (TOML). Every key is optional; defaults:
  seed = 0
  [grid]     lo = [-1.5, -1.5, -1.0], hi = [1.5, 1.5, 1.0], n = 33
  [metric]   kind = \"standard\" | \"perturbed\" (diag(1 + x^2/4, 1))
             | \"diagonal\" with g11, g22, omega = [[coef, px, py, pz], ...]
  [params]   p = 4.0, eps = 0.0, delta = 0.0
  [solve]    center = [0, 0, 0], radius = 0.75,
             boundary = \"x\" | \"y\" | \"z\" | \"zero\" | \"gauge\" | \"log_gauge\",
             init = \"boundary\" | \"random\", tol = 1e-9, max_iter = 20000
  [sweep]    schedule = [[eps, delta], ...] = [[1,1], [0.5,0.5], [0.25,0.25], [0.125,0.125], [0.0625,0.0625]]
  [coords]   kind = \"harmonic\" | \"qharmonic\", center = [0, 0, 0],
             radii = [0.4, 0.2, 0.1, 0.05], n = 33, tol = 1e-10
  [qcdiag]   map = \"identity\", tol = 0.05, center = [0, 0, 0], radius = 0.5, n = 32
  [capacity] center = [0, 0, 0], r = 0.5, R = 1.0, n = 48, modulus = false";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { lo: [-1.5, -1.5, -1.0], hi: [1.5, 1.5, 1.0], n: 33 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricConfig {
    #[default]
    Standard,
    Perturbed,
    Diagonal {
        g11: Polynomial,
        g22: Polynomial,
        #[serde(default = "unit_polynomial")]
        omega: Polynomial,
    },
}

fn unit_polynomial() -> Polynomial {
    Polynomial::constant(1.0)
}

impl MetricConfig {
    pub fn resolve(&self) -> SubRiemannianMetric {
        match self {
            MetricConfig::Standard => SubRiemannianMetric::standard(),
            MetricConfig::Perturbed => SubRiemannianMetric::perturbed_example(),
            MetricConfig::Diagonal { g11, g22, omega } => SubRiemannianMetric::diagonal(g11.clone(), g22.clone()).with_omega(omega.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub p: f64,
    pub eps: f64,
    pub delta: f64,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig { p: 4.0, eps: 0.0, delta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    X,
    Y,
    Z,
    Zero,
    Gauge,
    LogGauge,
}

impl BoundaryKind {
    fn eval(self, p: Point) -> f64 {
        match self {
            BoundaryKind::X => p.x,
            BoundaryKind::Y => p.y,
            BoundaryKind::Z => p.z,
            BoundaryKind::Zero => 0.0,
            BoundaryKind::Gauge => koranyi_gauge(p),
            BoundaryKind::LogGauge => koranyi_gauge(p).max(1e-300).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Boundary,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub boundary: BoundaryKind,
    pub init: InitKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { center: [0.0; 3], radius: 0.75, boundary: BoundaryKind::X, init: InitKind::Boundary, tol: 1e-9, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub schedule: Vec<[f64; 2]>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { schedule: (0..5).map(|k| [0.5f64.powi(k), 0.5f64.powi(k)]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Harmonic,
    Qharmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordsConfig {
    pub kind: ChartKind,
    pub center: [f64; 3],
    pub radii: Vec<f64>,
    pub n: usize,
    pub tol: f64,
}

impl Default for CoordsConfig {
    fn default() -> Self {
        CoordsConfig { kind: ChartKind::Harmonic, center: [0.0; 3], radii: vec![0.4, 0.2, 0.1, 0.05], n: 33, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcdiagConfig {
    pub map: String,
    pub tol: f64,
    pub center: [f64; 3],
    pub radius: f64,
    pub n: usize,
}

impl Default for QcdiagConfig {
    fn default() -> Self {
        QcdiagConfig { map: "identity".into(), tol: 0.05, center: [0.0; 3], radius: 0.5, n: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub center: [f64; 3],
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub n: usize,
    /// Report the ring modulus with its admissibility certificate (origin only).
    pub modulus: bool,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { center: [0.0; 3], r: 0.5, big_r: 1.0, n: 48, modulus: false }
    }
}

/// A complete experiment description. Task sections are optional in the file
/// and filled with defaults when their task runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub metric: MetricConfig,
    pub params: ParamsConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<CoordsConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qcdiag: Option<QcdiagConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<CapacityConfig>,
}

fn invalid(msg: impl Into<String>) -> QlabError {
    QlabError::InvalidArgument(msg.into())
}

fn pt(a: [f64; 3]) -> Point {
    Point::new(a[0], a[1], a[2])
}

impl ExperimentConfig {
    /// Parses TOML; syntax and type errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| QlabError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n < 8 || (0..3).any(|a| !(g.hi[a] > g.lo[a])) {
            return Err(invalid("[grid] needs n >= 8 and hi > lo on every axis"));
        }
        self.metric.resolve().g_inverse(Point::ORIGIN)?;
        self.operator_params()?;
        if let Some(s) = &self.solve {
            if !(s.radius > 0.0) || !(s.tol > 0.0) || s.max_iter == 0 {
                return Err(invalid("[solve] needs radius > 0, tol > 0 and max_iter > 0"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.schedule.is_empty() || s.schedule.iter().flatten().any(|v| !(*v >= 0.0)) {
                return Err(invalid("[sweep] schedule must be a nonempty list of nonnegative [eps, delta] pairs"));
            }
        }
        if let Some(c) = &self.coords {
            if c.radii.is_empty() || c.radii.iter().any(|r| !(*r > 0.0)) || c.n < 9 {
                return Err(invalid("[coords] needs positive radii and n >= 9"));
            }
        }
        if let Some(q) = &self.qcdiag {
            q.map.parse::<MapSpec>()?;
            if !(q.tol > 0.0) || !(q.radius > 0.0) || q.n < 12 {
                return Err(invalid("[qcdiag] needs tol > 0, radius > 0 and n >= 12"));
            }
        }
        if let Some(c) = &self.capacity {
            if !(c.r > 0.0 && c.big_r > c.r) || c.n < 12 {
                return Err(invalid("[capacity] needs 0 < r < R and n >= 12"));
            }
            if c.modulus && c.center != [0.0; 3] {
                return Err(invalid("[capacity] modulus is only available for rings centred at the origin"));
            }
        }
        Ok(())
    }

    pub fn operator_params(&self) -> Result<OperatorParams> {
        OperatorParams::new(self.params.p, self.params.delta, self.params.eps)
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        Grid::cube(pt(g.lo), pt(g.hi), g.n)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qlab", version, about = "Sub-Riemannian calculus on the Heisenberg group: solvers, coordinates and quasiconformality diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, help = "TOML experiment configuration (see `qlab help solve` for keys and defaults)", long_help = CONFIG_HELP)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout; side files go beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Popp data of a constant horizontal metric.
    Popp {
        /// Entries g11,g12,g21,g22 of the horizontal metric.
        #[arg(long, required = true, value_delimiter = ',', allow_negative_numbers = true)]
        g1: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dirichlet problem for the regularized p-Laplacian on a gauge ball.
    Solve(Common),
    /// (eps, delta) continuation sweep with regularity monitors.
    Sweep(Common),
    /// Harmonic or Q-harmonic horizontal coordinates with decay fit.
    Coords(Common),
    /// Quasiconformality condition battery for an explicit map.
    Qcdiag {
        #[command(flatten)]
        common: Common,
        /// Map, e.g. identity, dilation:2, rotation:0.5, shear:2,1, translate:x,y,z; join with `+` to compose [default: identity]
        #[arg(long)]
        map: Option<String>,
        /// Relative tolerance of every condition [default: 0.05]
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Q-capacity (and optionally modulus) of a Korányi ring condenser.
    Capacity(Common),
    /// Runs every task section present in the configuration into one report.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| QlabError::Format(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Side files written beside the report: `(file name, contents)`.
type SideFiles = Vec<(String, Vec<u8>)>;

fn snapshot(u: &ScalarField) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    u.write_snapshot(&mut buf)?;
    Ok(buf)
}

fn solver_options(cfg: &ExperimentConfig, s: &SolveConfig) -> SolverOptions {
    SolverOptions {
        tol: s.tol,
        max_iter: s.max_iter,
        init: match s.init {
            InitKind::Boundary => Init::Boundary,
            InitKind::Random => Init::Random(cfg.seed),
        },
        ..SolverOptions::default()
    }
}

fn run_solve(cfg: &mut ExperimentConfig, stem: &str, files: &mut SideFiles) -> Result<Value> {
    let s = cfg.solve.get_or_insert_with(SolveConfig::default).clone();
    let grid = cfg.grid()?;
    let mask = gauge_ball_mask(pt(s.center), s.radius, &grid)?;
    let boundary = ScalarField::from_fn(&grid, |p| s.boundary.eval(p));
    let (u, rep) = solve_plaplacian_with(&mask, &boundary, &cfg.operator_params()?, &cfg.metric.resolve(), &solver_options(cfg, &s))?;
    let deviation = mask.interior_nodes().map(|i| (u.values[i] - boundary.values[i]).abs()).fold(0.0, f64::max);
    let name = format!("{stem}.field");
    files.push((name.clone(), snapshot(&u)?));
    Ok(json!({ "report": rep, "interior_nodes": mask.count(), "max_deviation_from_boundary_function": deviation, "field": name }))
}

fn run_sweep(cfg: &mut ExperimentConfig, stem: &str, files: &mut SideFiles) -> Result<Value> {
    let s = cfg.solve.get_or_insert_with(SolveConfig::default).clone();
    let schedule: Vec<(f64, f64)> = cfg.sweep.get_or_insert_with(SweepConfig::default).schedule.iter().map(|v| (v[0], v[1])).collect();
    let grid = cfg.grid()?;
    let mask = gauge_ball_mask(pt(s.center), s.radius, &grid)?;
    let boundary = ScalarField::from_fn(&grid, |p| s.boundary.eval(p));
    let (u, reps) = continuation_sweep(&mask, &boundary, &schedule, &cfg.operator_params()?, &cfg.metric.resolve(), &solver_options(cfg, &s))?;
    let first = &reps[0];
    let worst = |f: fn(&crate::solver::SolveReport) -> f64| reps.iter().map(|r| f(r) / f(first)).fold(0.0, f64::max);
    let name = format!("{stem}.field");
    files.push((name.clone(), snapshot(&u)?));
    Ok(json!({
        "stages": reps,
        "max_ratio_to_first_stage": {
            "lip_ratio": worst(|r| r.lip_ratio),
            "caccioppoli_ratio": worst(|r| r.caccioppoli_ratio),
            "holder_seminorm": worst(|r| r.holder_seminorm),
        },
        "field": name,
    }))
}

fn run_coords(cfg: &mut ExperimentConfig, stem: &str, files: &mut SideFiles) -> Result<Value> {
    let c = cfg.coords.get_or_insert_with(CoordsConfig::default).clone();
    let opts = ChartOptions { n: c.n, tol: c.tol, ..ChartOptions::default() };
    let metric = cfg.metric.resolve();
    let chart = match c.kind {
        ChartKind::Harmonic => build_harmonic_coords_with(pt(c.center), &c.radii, &metric, &opts)?,
        ChartKind::Qharmonic => build_qharmonic_coords_with(pt(c.center), &c.radii, &cfg.operator_params()?, &metric, &opts)?,
    };
    let csv = format!("{stem}_decay.csv");
    files.push((csv.clone(), chart.decay_csv().into_bytes()));
    let (f1, f2) = (format!("{stem}_u1.field"), format!("{stem}_u2.field"));
    files.push((f1.clone(), snapshot(&chart.u1)?));
    files.push((f2.clone(), snapshot(&chart.u2)?));
    Ok(json!({ "chart": chart.summary(), "decay_csv": csv, "fields": [f1, f2] }))
}

fn run_qcdiag(cfg: &mut ExperimentConfig) -> Result<Value> {
    let q = cfg.qcdiag.get_or_insert_with(QcdiagConfig::default).clone();
    let map: MapSpec = q.map.parse()?;
    let region = gauge_ball_mask(pt(q.center), q.radius, &ball_grid(pt(q.center), q.radius, q.n)?)?;
    let rep = condition_battery(&map, &region, &cfg.operator_params()?, &cfg.metric.resolve(), q.tol)?;
    Ok(serde_json::to_value(rep).map_err(|e| QlabError::Format(e.to_string()))?)
}

fn run_capacity(cfg: &mut ExperimentConfig, stem: &str, files: &mut SideFiles) -> Result<Value> {
    let c = cfg.capacity.get_or_insert_with(CapacityConfig::default).clone();
    let params = cfg.operator_params()?;
    let metric = cfg.metric.resolve();
    if c.modulus {
        let rep = modulus_ring_report(c.r, c.big_r, &params, &metric, c.n)?;
        return Ok(json!({ "modulus": rep }));
    }
    let (e, f, domain) = ring_condenser(pt(c.center), c.r, c.big_r, c.n)?;
    let (u, rep) = capacity_with(&e, &f, &domain, &params, &metric, &capacity_options())?;
    let name = format!("{stem}_potential.field");
    files.push((name.clone(), snapshot(&u)?));
    Ok(json!({ "capacity": rep, "field": name }))
}

fn run_popp(g1: &[f64]) -> Result<(Value, Value)> {
    let m = Matrix2::new(g1[0], g1[1], g1[2], g1[3]);
    let data = popp_step2(&m)?;
    Ok((json!({ "g1": g1 }), serde_json::to_value(data).map_err(|e| QlabError::Format(e.to_string()))?))
}

fn envelope(command: &str, config: Value, body: std::result::Result<Value, &QlabError>) -> Value {
    match body {
        Ok(result) => json!({ "format_version": FORMAT_VERSION, "command": command, "config": config, "result": result }),
        Err(e) => json!({
            "format_version": FORMAT_VERSION,
            "command": command,
            "config": config,
            "error": { "kind": e.kind(), "message": e.to_string() },
        }),
    }
}

fn emit(out: Option<&Path>, doc: &Value, files: &SideFiles) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("JSON values always serialize");
    text.push('\n');
    match out {
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            for (name, bytes) in files {
                fs::write(dir.join(name), bytes)?;
            }
            fs::write(path, text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Runs one command; returns the process exit code (0 success, 2 usage or
/// configuration error, 3 numerical failure).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, common) = match &cli.command {
        Command::Popp { .. } => ("popp", None),
        Command::Solve(c) => ("solve", Some(c)),
        Command::Sweep(c) => ("sweep", Some(c)),
        Command::Coords(c) => ("coords", Some(c)),
        Command::Qcdiag { common, .. } => ("qcdiag", Some(common)),
        Command::Capacity(c) => ("capacity", Some(c)),
        Command::Report(c) => ("report", Some(c)),
    };
    let out = match &cli.command {
        Command::Popp { out, .. } => out.clone(),
        _ => common.and_then(|c| c.out.clone()),
    };
    let stem = out.as_ref().and_then(|p| p.file_stem()).map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned());

    let mut cfg = match common.map(load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("qlab: configuration error: {e}");
            return 2;
        }
    };
    if let Command::Qcdiag { map, tol, .. } = &cli.command {
        let q = cfg.qcdiag.get_or_insert_with(QcdiagConfig::default);
        if let Some(m) = map {
            q.map = m.clone();
        }
        if let Some(t) = tol {
            q.tol = *t;
        }
        if let Err(e) = cfg.validate() {
            eprintln!("qlab: configuration error: {e}");
            return 2;
        }
    }

    if let Command::Popp { g1, .. } = &cli.command {
        if g1.len() != 4 {
            eprintln!("qlab: --g1 takes exactly four comma-separated entries");
            return 2;
        }
    }
    let mut files = SideFiles::new();
    let (config, body) = match &cli.command {
        Command::Popp { g1, .. } => match run_popp(g1) {
            Ok((c, r)) => (c, Ok(r)),
            Err(e) => (json!({ "g1": g1 }), Err(e)),
        },
        _ => {
            let body = match name {
                "solve" => run_solve(&mut cfg, &stem, &mut files),
                "sweep" => run_sweep(&mut cfg, &stem, &mut files),
                "coords" => run_coords(&mut cfg, &stem, &mut files),
                "qcdiag" => run_qcdiag(&mut cfg),
                "capacity" => run_capacity(&mut cfg, &stem, &mut files),
                _ => run_report(&mut cfg, &stem, &mut files),
            };
            (serde_json::to_value(&cfg).expect("config serializes"), body)
        }
    };
    let code = if body.is_ok() { 0 } else { 3 };
    let doc = envelope(name, config, body.as_ref().map(|v| v.clone()));
    if let Err(e) = emit(out.as_deref(), &doc, &files) {
        eprintln!("qlab: cannot write report: {e}");
        return 3;
    }
    code
}

fn run_report(cfg: &mut ExperimentConfig, stem: &str, files: &mut SideFiles) -> Result<Value> {
    let mut sections = serde_json::Map::new();
    if cfg.solve.is_some() && cfg.sweep.is_none() {
        sections.insert("solve".into(), run_solve(cfg, &format!("{stem}_solve"), files)?);
    }
    if cfg.sweep.is_some() {
        sections.insert("sweep".into(), run_sweep(cfg, &format!("{stem}_sweep"), files)?);
    }
    if cfg.coords.is_some() {
        sections.insert("coords".into(), run_coords(cfg, &format!("{stem}_coords"), files)?);
    }
    if cfg.qcdiag.is_some() {
        sections.insert("qcdiag".into(), run_qcdiag(cfg)?);
    }
    if cfg.capacity.is_some() {
        sections.insert("capacity".into(), run_capacity(cfg, &format!("{stem}_capacity"), files)?);
    }
    if sections.is_empty() {
        return Err(invalid("the configuration has no task sections"));
    }
    Ok(Value::Object(sections))
}
