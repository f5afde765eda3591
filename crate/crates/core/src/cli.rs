//! Experiment harness: configuration, case-study sweeps, the run pipeline and
//! CSV emission.
//!
//! A run is described by a single TOML file. Validation failures map to exit
//! code 2, runtime failures to exit code 1 with the failing stage named.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::{
    dissipative_min, fit_scaling, theorem_bound, thm2_fixed_min_over_t1, v_grid, BoundExtras, BoundKind, BoundParams,
    BoundQuery, PowerLawFit,
};
use crate::coupled::{cosimulate, CosimConfig, Coupling, PathwiseErrorReport};
use crate::effective::{
    estimate_binned, estimate_binned_from_samples, estimate_dissipativity, estimate_fiber, estimate_kappas,
    estimate_lipschitz, quadrature_oracle, rho_profile, EffectiveModel, EstimationMethod, RhoOptions, ZGrid,
};
use crate::error::Error;
use crate::geometry::frobenius_obstruction;
use crate::model::Vector;
use crate::quadrature::QuadOptions;
use crate::rng::{seeded, StreamPurpose};
use crate::sampler::{simulate_full, write_trajectory_csv, FiberConfig, IntegratorConfig, X0Source};
use crate::systems::{build, BuiltinSystem, SystemParams, NAMES};

pub const SEED_ENV: &str = "EFFDYN_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("stage `{stage}` failed: {source}")]
    Runtime {
        stage: &'static str,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime { .. } => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn stage<T>(name: &'static str, r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Runtime { stage: name, source })
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("`{field}`: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Rectangular z-grid, one entry per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    pub method: EstimationMethod,
    /// Exact equilibrium draws used for κ estimates, Q in fiber mode, and
    /// Frobenius checks.
    pub samples: usize,
    /// Nodes per axis when the grid is derived from the system's support.
    pub nodes_per_axis: usize,
    pub fiber_replicas: usize,
    pub fiber_steps: usize,
    pub rho_cells: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            method: EstimationMethod::Quadrature,
            samples: 20_000,
            nodes_per_axis: 41,
            fiber_replicas: 4,
            fiber_steps: 20_000,
            rho_cells: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosimSection {
    /// Defaults to `integrator.dt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub horizon: f64,
    pub n_replicas: usize,
    pub record_every: usize,
    pub coarse_stride: usize,
    pub coupling: Coupling,
}

impl Default for CosimSection {
    fn default() -> Self {
        Self {
            dt: None,
            horizon: 1.0,
            n_replicas: 500,
            record_every: 100,
            coarse_stride: 10,
            coupling: Coupling::Coupled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Any of `csv`, `json`; CSV is always written.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("effdyn-out"),
            formats: vec!["csv".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub kind: BoundKind,
    pub times: Vec<f64>,
    /// Estimated from the system when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<BoundParams>,
    pub extras: BoundExtras,
    /// Points per axis of the `(v₁, v₂)` grid used when `v1`/`v2` are not given.
    pub v_grid: usize,
    /// Points of the `t₁` grid on `[t₀, t]` for `thm2_fixed`; 0 uses the given `t1`.
    pub t1_grid: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            kind: BoundKind::Thm1,
            times: vec![0.25, 0.5, 1.0],
            params: None,
            extras: BoundExtras::default(),
            v_grid: 40,
            t1_grid: 0,
        }
    }
}

fn default_frobenius_tol() -> f64 {
    1e-6
}

fn default_frobenius_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemParams,
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub cosim: CosimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_frobenius_tol")]
    pub frobenius_tol: f64,
    #[serde(default = "default_frobenius_points")]
    pub frobenius_points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsConfig>,
}

impl ExperimentConfig {
    /// Parses and validates; syntax errors carry the TOML line and column.
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> CliResult<()> {
        if !NAMES.contains(&self.system.name.as_str()) {
            return Err(invalid(
                "system.name",
                format!("unknown system `{}` (known: {})", self.system.name, NAMES.join(", ")),
            ));
        }
        if !(self.system.beta > 0.0 && self.system.beta.is_finite()) {
            return Err(invalid("system.beta", "must be positive"));
        }
        self.integrator.validate().map_err(|e| invalid("integrator", e))?;
        if let Some(grid) = &self.grid {
            if grid.axes.is_empty() {
                return Err(invalid("grid.axes", "must not be empty"));
            }
            for (i, a) in grid.axes.iter().enumerate() {
                if !(a.lo < a.hi && a.lo.is_finite() && a.hi.is_finite()) || a.n < 2 {
                    return Err(invalid(
                        &format!("grid.axes[{i}]"),
                        "needs finite lo < hi and at least 2 nodes",
                    ));
                }
            }
        }
        let est = &self.estimation;
        if est.samples < 2 || est.nodes_per_axis < 2 || est.fiber_replicas == 0 || est.fiber_steps == 0 {
            return Err(invalid(
                "estimation",
                "samples and nodes_per_axis must be ≥ 2, fiber_replicas and fiber_steps ≥ 1",
            ));
        }
        if est.rho_cells < 8 {
            return Err(invalid("estimation.rho_cells", "must be at least 8"));
        }
        let c = &self.cosim;
        if let Some(dt) = c.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(invalid("cosim.dt", "must be positive"));
            }
        }
        if !(c.horizon >= 0.0 && c.horizon.is_finite()) {
            return Err(invalid("cosim.horizon", "must be finite and nonnegative"));
        }
        if c.n_replicas == 0 || c.record_every == 0 || c.coarse_stride == 0 {
            return Err(invalid(
                "cosim",
                "n_replicas, record_every and coarse_stride must be positive",
            ));
        }
        if let Some(sweep) = &self.sweep {
            self.system
                .clone()
                .with(&sweep.parameter, 1.0)
                .map_err(|e| invalid("sweep.parameter", e))?;
            if sweep.values.is_empty() {
                return Err(invalid("sweep.values", "must not be empty"));
            }
            if sweep.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("sweep.values", "must be positive and finite"));
            }
            let inc = sweep.values.windows(2).all(|w| w[1] > w[0]);
            let dec = sweep.values.windows(2).all(|w| w[1] < w[0]);
            if !(inc || dec) {
                return Err(invalid("sweep.values", "must be strictly monotone"));
            }
        }
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                return Err(invalid("output.formats", format!("unknown format `{f}`")));
            }
        }
        if !(self.frobenius_tol > 0.0 && self.frobenius_tol.is_finite()) {
            return Err(invalid("frobenius_tol", "must be positive"));
        }
        if self.frobenius_points == 0 {
            return Err(invalid("frobenius_points", "must be positive"));
        }
        if let Some(b) = &self.bounds {
            if b.times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                return Err(invalid("bounds.times", "must be finite and nonnegative"));
            }
            if let Some(p) = &b.params {
                p.validate().map_err(|e| invalid("bounds.params", e))?;
            }
            if b.v_grid == 0 {
                return Err(invalid("bounds.v_grid", "must be positive"));
            }
        }
        Ok(())
    }

    /// Copy with the seed replaced and propagated to the integrator.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.integrator.seed = seed;
        c
    }

    fn wants_json(&self) -> bool {
        self.output.formats.iter().any(|f| f == "json")
    }

    pub fn cosim_config(&self, dt: f64) -> CosimConfig {
        CosimConfig {
            dt,
            horizon: self.cosim.horizon,
            n_replicas: self.cosim.n_replicas,
            seed: self.seed,
            record_every: self.cosim.record_every,
            coarse_stride: self.cosim.coarse_stride,
            coupling: self.cosim.coupling,
        }
    }
}

/// Seed precedence: environment variable, then command-line flag, then file.
pub fn resolve_seed(file: u64, flag: Option<u64>, env: Option<&str>) -> CliResult<u64> {
    if let Some(v) = env {
        return v
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")));
    }
    Ok(flag.unwrap_or(file))
}

/// Nodes at cell centres of the support box, so none sits on its boundary.
pub fn default_grid(support: &[(f64, f64)], nodes: usize) -> crate::Result<ZGrid> {
    let axes = support
        .iter()
        .map(|&(lo, hi)| {
            let h = (hi - lo) / nodes as f64;
            (0..nodes).map(|i| lo + (i as f64 + 0.5) * h).collect()
        })
        .collect();
    ZGrid::new(axes)
}

pub fn grid_for(sys: &BuiltinSystem, cfg: &ExperimentConfig) -> crate::Result<ZGrid> {
    match &cfg.grid {
        Some(g) => ZGrid::uniform(&g.axes.iter().map(|a| (a.lo, a.hi, a.n)).collect::<Vec<_>>()),
        None => default_grid(&sys.support, cfg.estimation.nodes_per_axis),
    }
}

/// `n` exact equilibrium draws, one independent stream per draw.
pub fn equilibrium_samples(sys: &BuiltinSystem, n: usize, seed: u64) -> Vec<Vector> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(seed, i, StreamPurpose::Independent);
            sys.sample_equilibrium(&mut rng)
        })
        .collect()
}

/// Builds the effective model with the configured estimator.
pub fn build_model(sys: &BuiltinSystem, cfg: &ExperimentConfig) -> crate::Result<EffectiveModel> {
    let grid = grid_for(sys, cfg)?;
    let spec = &sys.spec;
    match cfg.estimation.method {
        EstimationMethod::Quadrature => {
            let chart = sys.chart.as_ref().ok_or_else(|| {
                Error::UnsupportedGeometry(format!("system `{}` has no fiber chart", sys.params.name))
            })?;
            quadrature_oracle(spec, chart, &grid, &sys.support, &QuadOptions::default())
        }
        EstimationMethod::Binned => {
            let x0 = X0Source::Equilibrium(sys.sampler.clone());
            estimate_binned(spec, &grid, &cfg.integrator, &x0)
        }
        EstimationMethod::Fiber => {
            let samples = equilibrium_samples(sys, cfg.estimation.samples, cfg.seed);
            let q = estimate_binned_from_samples(spec, &grid, &samples)?.q;
            let base = IntegratorConfig {
                n_steps: cfg.estimation.fiber_steps,
                n_replicas: cfg.estimation.fiber_replicas,
                ..cfg.integrator.clone()
            };
            let fc = FiberConfig::new(grid.node(0), base);
            let anchor = samples[0].clone();
            let start = |z: &Vector| match &sys.chart {
                Some(chart) => chart.centre(z),
                None => anchor.clone(),
            };
            estimate_fiber(spec, &grid, &fc, &start, q)
        }
    }
}

/// Estimates κ₁, κ₂ by Monte Carlo, ρ as the minimum fiber gap over the
/// grid, and L_b, L_σ, L_d from the gridded model.
pub fn estimate_bound_params(
    sys: &BuiltinSystem,
    model: &EffectiveModel,
    samples: &[Vector],
    rho_cells: usize,
) -> crate::Result<BoundParams> {
    let kappas = estimate_kappas(&sys.spec, samples)?;
    let chart = sys
        .chart
        .as_ref()
        .ok_or_else(|| Error::UnsupportedGeometry("ρ needs a fiber chart".into()))?;
    let opts = RhoOptions {
        cells: rho_cells,
        ..Default::default()
    };
    let (_, rho) = rho_profile(&sys.spec, chart, &model.grid, &opts)?;
    let lip = estimate_lipschitz(model)?;
    let l_d = estimate_dissipativity(model, |_| true)?;
    Ok(BoundParams {
        kappa1: kappas.kappa1(),
        kappa2: kappas.kappa2(),
        rho,
        l_b: lip.l_b,
        l_sigma: lip.l_sigma,
        l_d,
        alpha: 1.0,
        beta: sys.spec.beta(),
        c1_sup_phi: 0.0,
        c2_sup_a: 0.0,
    })
}

/// Evaluates the configured bound at each requested time, minimizing over
/// free parameters where the configuration leaves them open.
pub fn bound_table(b: &BoundsConfig, params: &BoundParams) -> crate::Result<Vec<(f64, f64)>> {
    b.times
        .iter()
        .map(|&t| {
            let q = BoundQuery::new(b.kind, *params, t).with_extras(b.extras);
            let value = match b.kind {
                BoundKind::DissContractive | BoundKind::DissExpansive
                    if b.extras.v1.is_none() || b.extras.v2.is_none() =>
                {
                    dissipative_min(params, b.kind, t, &v_grid(b.v_grid))?.value
                }
                BoundKind::Thm2Fixed if b.t1_grid > 0 => {
                    let t0 = b.extras.t0.unwrap_or(t);
                    let grid: Vec<f64> = (0..=b.t1_grid)
                        .map(|i| t0 + (t - t0) * i as f64 / b.t1_grid as f64)
                        .collect();
                    thm2_fixed_min_over_t1(&q, &grid)?.value
                }
                _ => theorem_bound(&q)?,
            };
            Ok((t, value))
        })
        .collect()
}

/// The three linear case studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// Stiff fast potential `K y²/(2ε)`.
    Case1,
    /// Fast mobility `1/δ`.
    Case2,
    /// Both.
    Case3,
}

impl Case {
    pub fn system_name(self) -> &'static str {
        match self {
            Case::Case1 => "case1-linear",
            Case::Case2 => "case2-linear",
            Case::Case3 => "case3-linear",
        }
    }
}

impl std::str::FromStr for Case {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "case1" => Ok(Case::Case1),
            "case2" => Ok(Case::Case2),
            "case3" => Ok(Case::Case3),
            _ => Err(CliError::Invalid(format!("unknown case `{s}` (case1, case2, case3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub value: f64,
    pub dt: f64,
    pub mean_sq_sup: f64,
    pub se: f64,
    pub mean_sq_sup_coarse: f64,
    pub excursions: u64,
    /// `ok`, or the failing stage and message.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub system: String,
    pub parameter: String,
    pub horizon: f64,
    pub rows: Vec<ScalingRow>,
    /// Absent when fewer than three sweep points succeeded.
    pub fit: Option<PowerLawFit>,
}

impl ScalingTable {
    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            self.parameter.as_str(),
            "dt",
            "mean_sq_sup",
            "se",
            "mean_sq_sup_coarse",
            "excursions",
            "status",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.value.to_string(),
                r.dt.to_string(),
                r.mean_sq_sup.to_string(),
                r.se.to_string(),
                r.mean_sq_sup_coarse.to_string(),
                r.excursions.to_string(),
                r.status.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Time step for one sweep point: the configured step, capped at `δ/50` for
/// systems with a fast mobility.
pub fn sweep_dt(params: &SystemParams, dt: f64) -> f64 {
    match params.name.as_str() {
        "case2-linear" | "case3-linear" => dt.min(params.delta / 50.0),
        _ => dt,
    }
}

fn run_point(params: &SystemParams, cfg: &ExperimentConfig) -> std::result::Result<PathwiseErrorReport, String> {
    let tag = |s: &str, e: Error| format!("{s}: {e}");
    let sys = build(params).map_err(|e| tag("build", e))?;
    let model = build_model(&sys, cfg).map_err(|e| tag("estimate", e))?;
    let dt = sweep_dt(params, cfg.cosim.dt.unwrap_or(cfg.integrator.dt));
    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    cosimulate(&sys.spec, &model, &cfg.cosim_config(dt), &x0).map_err(|e| tag("cosim", e))
}

/// Sweeps `cfg.sweep` over `cfg.system`, recording the squared sup-error at
/// the horizon and fitting a power law. All points share the seed.
pub fn run_sweep(cfg: &ExperimentConfig) -> CliResult<ScalingTable> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| invalid("sweep", "a sweep section is required"))?;
    if sweep.values.is_empty() {
        return Err(invalid("sweep.values", "must not be empty"));
    }
    let mut rows = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let params = cfg
            .system
            .clone()
            .with(&sweep.parameter, value)
            .map_err(|e| invalid("sweep.parameter", e))?;
        let dt = sweep_dt(&params, cfg.cosim.dt.unwrap_or(cfg.integrator.dt));
        let row = match run_point(&params, cfg) {
            Ok(rep) => {
                let (m, se) = rep.final_sup();
                ScalingRow {
                    value,
                    dt,
                    mean_sq_sup: m,
                    se,
                    mean_sq_sup_coarse: rep.mean_sq_sup_coarse,
                    excursions: rep.excursions,
                    status: if rep.unreliable {
                        "ok (excursions)".into()
                    } else {
                        "ok".into()
                    },
                }
            }
            Err(msg) => ScalingRow {
                value,
                dt,
                mean_sq_sup: f64::NAN,
                se: f64::NAN,
                mean_sq_sup_coarse: f64::NAN,
                excursions: 0,
                status: msg,
            },
        };
        rows.push(row);
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.status.starts_with("ok"))
        .map(|r| (r.value, r.mean_sq_sup))
        .collect();
    let fit = if points.len() >= 3 {
        fit_scaling(&points).ok()
    } else {
        None
    };
    Ok(ScalingTable {
        system: cfg.system.name.clone(),
        parameter: sweep.parameter.clone(),
        horizon: cfg.cosim.horizon,
        rows,
        fit,
    })
}

/// Runs one of the linear case studies with the sweep in `cfg`; the system
/// name in `cfg` is replaced by the case's.
pub fn run_case_experiment(case: Case, cfg: &ExperimentConfig) -> CliResult<ScalingTable> {
    let mut cfg = cfg.clone();
    cfg.system.name = case.system_name().into();
    cfg.validate()?;
    run_sweep(&cfg)
}

/// Frobenius residuals at equilibrium samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FrobeniusScan {
    pub points: Vec<Vector>,
    pub residuals: Vec<f64>,
}

impl FrobeniusScan {
    pub fn max(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        let n = self.points.first().map_or(0, |p| p.len());
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["point".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("residual".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, (p, r)) in self.points.iter().zip(&self.residuals).enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(p.iter().map(|v| v.to_string()));
            rec.push(r.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn frobenius_scan(sys: &BuiltinSystem, n: usize, seed: u64) -> crate::Result<FrobeniusScan> {
    let points = equilibrium_samples(sys, n, seed);
    let residuals = points
        .par_iter()
        .map(|x| frobenius_obstruction(&sys.spec, x).map(|r| r.residual))
        .collect::<crate::Result<Vec<f64>>>()?;
    Ok(FrobeniusScan { points, residuals })
}

fn write_bound_csv(path: &Path, rows: &[(f64, f64)]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "bound"]).map_err(csv_err)?;
    for (t, b) in rows {
        w.write_record([t.to_string(), b.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    stage("output", fs::create_dir_all(dir).map_err(Error::from))
}

/// `simulate`: one full trajectory from an equilibrium draw.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    prepare_dir(out)?;
    let sys = stage("build", build(&cfg.system))?;
    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    let path = stage("simulate", simulate_full(&sys.spec, &cfg.integrator, &x0, 0))?;
    let points = stage("simulate", path.collect::<crate::Result<Vec<_>>>())?;
    let file = out.join("trajectory.csv");
    stage("write", write_trajectory_csv(&file, &points))?;
    Ok(file)
}

/// `coefficients`: estimates and saves the effective model.
pub fn cmd_coefficients(cfg: &ExperimentConfig, out: &Path) -> CliResult<EffectiveModel> {
    prepare_dir(out)?;
    let sys = stage("build", build(&cfg.system))?;
    let model = stage("estimate", build_model(&sys, cfg))?;
    stage("write", model.save(&out.join("model.txt")))?;
    stage("write", model.write_csv(&out.join("coefficients.csv")))?;
    Ok(model)
}

/// `cosim`: estimates the model, then co-simulates.
pub fn cmd_cosim(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathwiseErrorReport> {
    prepare_dir(out)?;
    let sys = stage("build", build(&cfg.system))?;
    let model = stage("estimate", build_model(&sys, cfg))?;
    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    let dt = cfg.cosim.dt.unwrap_or(cfg.integrator.dt);
    let report = stage("cosim", cosimulate(&sys.spec, &model, &cfg.cosim_config(dt), &x0))?;
    stage("write", report.write_csv(&out.join("cosim.csv")))?;
    if cfg.wants_json() {
        stage("write", write_json(&out.join("cosim.json"), &report))?;
    }
    Ok(report)
}

/// `scaling`: a parameter sweep with power-law fit.
pub fn cmd_scaling(cfg: &ExperimentConfig, out: &Path) -> CliResult<ScalingTable> {
    prepare_dir(out)?;
    let table = run_sweep(cfg)?;
    stage("write", table.write_csv(&out.join("scaling.csv")))?;
    if cfg.wants_json() {
        stage("write", write_json(&out.join("scaling.json"), &table))?;
    }
    Ok(table)
}

/// `frobenius`: residual scan; the boolean is whether every residual is within tolerance.
pub fn cmd_frobenius(cfg: &ExperimentConfig, out: &Path) -> CliResult<(FrobeniusScan, bool)> {
    prepare_dir(out)?;
    let sys = stage("build", build(&cfg.system))?;
    let scan = stage("frobenius", frobenius_scan(&sys, cfg.frobenius_points, cfg.seed))?;
    stage("write", scan.write_csv(&out.join("frobenius.csv")))?;
    let ok = scan.max() <= cfg.frobenius_tol;
    Ok((scan, ok))
}

fn resolve_bound_params(cfg: &ExperimentConfig, b: &BoundsConfig) -> CliResult<BoundParams> {
    if let Some(p) = b.params {
        return Ok(p);
    }
    let sys = stage("build", build(&cfg.system))?;
    let model = stage("estimate", build_model(&sys, cfg))?;
    let samples = equilibrium_samples(&sys, cfg.estimation.samples, cfg.seed);
    stage(
        "bound-params",
        estimate_bound_params(&sys, &model, &samples, cfg.estimation.rho_cells),
    )
}

/// `bounds`: CSV of `(t, bound)`.
pub fn cmd_bounds(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<(f64, f64)>> {
    prepare_dir(out)?;
    let b = cfg.bounds.clone().unwrap_or_default();
    let params = resolve_bound_params(cfg, &b)?;
    let rows = stage("bounds", bound_table(&b, &params))?;
    stage("write", write_bound_csv(&out.join("bounds.csv"), &rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub worker_threads: usize,
    pub wall_clock_seconds: f64,
    pub stages: Vec<String>,
    /// SHA-256 of every emitted file, by file name.
    pub outputs: BTreeMap<String, String>,
}

/// Full run: model, co-simulation, bound evaluation, optional sweep, and a
/// manifest with the config hash and output checksums.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    let start = Instant::now();
    prepare_dir(out)?;
    let config_text = cfg.to_toml_string();
    stage(
        "write",
        fs::write(out.join("config.toml"), &config_text).map_err(Error::from),
    )?;
    let mut stages = vec!["config".to_string()];

    let sys = stage("build", build(&cfg.system))?;
    let model = stage("estimate", build_model(&sys, cfg))?;
    stage("write", model.save(&out.join("model.txt")))?;
    stage("write", model.write_csv(&out.join("coefficients.csv")))?;
    stages.push("estimate".into());

    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    let dt = cfg.cosim.dt.unwrap_or(cfg.integrator.dt);
    let report = stage("cosim", cosimulate(&sys.spec, &model, &cfg.cosim_config(dt), &x0))?;
    stage("write", report.write_csv(&out.join("cosim.csv")))?;
    stages.push("cosim".into());

    let (sup, se) = report.final_sup();
    let mut summary = serde_json::json!({
        "system": cfg.system.name,
        "horizon": report.horizon,
        "dt": report.dt,
        "n_replicas": report.n_replicas,
        "mean_sq_sup": sup,
        "se_sup": se,
        "mean_sq_sup_coarse": report.mean_sq_sup_coarse,
        "excursions": report.excursions,
        "unreliable": report.unreliable,
    });

    if let Some(b) = &cfg.bounds {
        let params = match b.params {
            Some(p) => p,
            None => {
                let samples = equilibrium_samples(&sys, cfg.estimation.samples, cfg.seed);
                stage(
                    "bound-params",
                    estimate_bound_params(&sys, &model, &samples, cfg.estimation.rho_cells),
                )?
            }
        };
        let rows = stage("bounds", bound_table(b, &params))?;
        stage("write", write_bound_csv(&out.join("bounds.csv"), &rows))?;
        stage("write", write_json(&out.join("bound_params.json"), &params))?;
        summary["bound_kind"] = serde_json::json!(b.kind.name());
        stages.push("bounds".into());
    }

    if cfg.sweep.is_some() {
        let table = run_sweep(cfg)?;
        stage("write", table.write_csv(&out.join("scaling.csv")))?;
        if let Some(fit) = table.fit {
            summary["scaling_slope"] = serde_json::json!(fit.slope);
            summary["scaling_slope_se"] = serde_json::json!(fit.stderr);
        }
        stages.push("scaling".into());
    }

    stage("write", write_json(&out.join("summary.json"), &summary))?;

    let mut outputs = BTreeMap::new();
    let mut entries: Vec<_> = stage("manifest", fs::read_dir(out).map_err(Error::from))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    entries.sort();
    for p in entries {
        let bytes = stage("manifest", fs::read(&p).map_err(Error::from))?;
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        outputs.insert(name, sha256_hex(&bytes));
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        worker_threads: rayon::current_num_threads(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        stages,
        outputs,
    };
    stage("write", write_json(&out.join("manifest.json"), &manifest))?;
    Ok(manifest)
}
