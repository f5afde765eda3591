//! Co-simulation of the full process and the effective process driven by
//! the coupled Brownian motion `dw̃ = (∇ξ a ∇ξᵀ)^{-1/2} ∇ξ σ dW`.
//!
//! Both processes advance with the same step and the same `dW`, so the
//! measured error `ξ(x(s)) − z(s)` is free of asynchronous-stepping effects.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective::EffectiveModel;
use crate::error::{Error, Result};
use crate::geometry::{phi_matrix, spd_inv_sqrt};
use crate::model::{Matrix, SystemSpec, Vector};
use crate::rng::{NoiseStream, StreamPurpose};
use crate::sampler::{csv_err, em_step_at, X0Source};
use crate::stats::RunningStats;

/// Runs with more clamped steps than this fraction are flagged unreliable.
pub const EXCURSION_LIMIT: f64 = 0.01;
const CHUNKS: usize = 64;

/// `dw̃ = A⁻¹ ∇ξ σ dW` at `x`.
pub fn coupled_noise_increment(spec: &SystemSpec, x: &Vector, dw: &Vector) -> Result<Vector> {
    let phi = phi_matrix(spec, x)?;
    let jac = spec.xi_jac(x)?;
    let sigma = spec.sigma(x)?;
    Ok(spd_inv_sqrt(&phi)? * (jac * (sigma * dw)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// `z` is driven by `w̃` built from the full dynamics' noise.
    #[default]
    Coupled,
    /// `z` is driven by an independent Brownian motion (a control).
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Recording stride in steps for the error time series.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Coarser stride at which the sup is also taken, to expose the effect
    /// of monitoring the path only at discrete times.
    #[serde(default = "default_coarse_stride")]
    pub coarse_stride: usize,
    #[serde(default)]
    pub coupling: Coupling,
}

fn default_record_every() -> usize {
    100
}
fn default_coarse_stride() -> usize {
    10
}

impl CosimConfig {
    pub fn new(dt: f64, horizon: f64, n_replicas: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            n_replicas,
            seed,
            record_every: default_record_every(),
            coarse_stride: default_coarse_stride(),
            coupling: Coupling::Coupled,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be nonnegative, got {}",
                self.horizon
            )));
        }
        if self.n_replicas == 0 || self.record_every == 0 || self.coarse_stride == 0 {
            return Err(Error::Config(
                "n_replicas, record_every and coarse_stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Step indices at which errors are recorded: every `record_every`-th
    /// step plus the final one.
    fn schedule(&self) -> Vec<usize> {
        let n = self.n_steps();
        let mut s: Vec<usize> = (0..=n).step_by(self.record_every).collect();
        if s.last() != Some(&n) {
            s.push(n);
        }
        s
    }
}

struct ReplicaErrors {
    sup_sq: Vec<f64>,
    marginal_sq: Vec<f64>,
    coarse_sup_sq: f64,
    excursions: u64,
}

fn run_replica(
    spec: &SystemSpec,
    model: &EffectiveModel,
    cfg: &CosimConfig,
    x0: &X0Source,
    replica: usize,
    record: &[usize],
) -> Result<ReplicaErrors> {
    let (dt, beta) = (cfg.dt, spec.beta());
    let scale = (2.0 / beta).sqrt();
    let mut x = x0.initial_state(cfg.seed, replica);
    let mut z = spec.xi(&x);
    let mut noise = NoiseStream::new(cfg.seed, replica, StreamPurpose::Dynamics, spec.noise_dim());
    let mut indep = NoiseStream::new(cfg.seed, replica, StreamPurpose::Independent, spec.m());
    let last = *record.last().unwrap_or(&0);
    let mut out = ReplicaErrors {
        sup_sq: Vec::with_capacity(record.len()),
        marginal_sq: Vec::with_capacity(record.len()),
        coarse_sup_sq: 0.0,
        excursions: 0,
    };
    let mut sup_sq = 0.0f64;
    let mut next_record = 0;
    for k in 0..=last {
        let e2 = (spec.xi(&x) - &z).norm_squared();
        if !e2.is_finite() {
            return Err(Error::Divergence {
                replica: Some(replica),
                step: k,
            });
        }
        sup_sq = sup_sq.max(e2);
        if k % cfg.coarse_stride == 0 || k == last {
            out.coarse_sup_sq = out.coarse_sup_sq.max(e2);
        }
        if next_record < record.len() && record[next_record] == k {
            out.sup_sq.push(sup_sq);
            out.marginal_sq.push(e2);
            next_record += 1;
        }
        if k == last {
            break;
        }
        let dw = noise.increment(k as u64, dt);
        let dw_tilde = match cfg.coupling {
            Coupling::Coupled => coupled_noise_increment(spec, &x, &dw)?,
            Coupling::Independent => indep.increment(k as u64, dt),
        };
        let (b, c1) = model.b_at(&z);
        let (sigma, c2) = model.sigma_at(&z)?;
        if c1 || c2 {
            out.excursions += 1;
        }
        z += b * dt + sigma * dw_tilde * scale;
        x = em_step_at(spec, &x, &dw, dt, k + 1).map_err(|e| e.with_replica(replica))?;
    }
    Ok(out)
}

fn run_all(
    spec: &SystemSpec,
    model: &EffectiveModel,
    cfg: &CosimConfig,
    x0: &X0Source,
    record: &[usize],
) -> Result<Vec<ReplicaErrors>> {
    if model.m() != spec.m() {
        return Err(Error::Dimension {
            what: "effective model",
            got: model.m(),
            expected: spec.m(),
        });
    }
    let n = cfg.n_replicas;
    let k = n.clamp(1, CHUNKS);
    let parts = (0..k)
        .into_par_iter()
        .map(|c| {
            (c * n / k..(c + 1) * n / k)
                .map(|r| run_replica(spec, model, cfg, x0, r, record))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Monte Carlo statistics of the pathwise and marginal errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseErrorReport {
    pub horizon: f64,
    pub dt: f64,
    pub n_replicas: usize,
    pub seed: u64,
    pub coupling: Coupling,
    /// Recording times.
    pub times: Vec<f64>,
    /// `E sup_{s ≤ t} |ξ(x(s)) − z(s)|²` at each recording time.
    pub mean_sq_sup: Vec<f64>,
    pub se_sup: Vec<f64>,
    /// `E |ξ(x(t)) − z(t)|²` at each recording time.
    pub marginal_mse: Vec<f64>,
    pub se_marginal: Vec<f64>,
    /// Per-replica `sup_{s ≤ horizon} |ξ(x(s)) − z(s)|`.
    pub replica_sup: Vec<f64>,
    /// Squared sup over every `coarse_stride`-th step only, at the horizon.
    pub coarse_stride: usize,
    pub mean_sq_sup_coarse: f64,
    pub se_sup_coarse: f64,
    /// Steps at which `z` left the model grid and coefficients were clamped.
    pub excursions: u64,
    pub total_steps: u64,
    pub unreliable: bool,
}

impl PathwiseErrorReport {
    fn from_replicas(cfg: &CosimConfig, record: &[usize], reps: Vec<ReplicaErrors>) -> Self {
        let nrec = record.len();
        let mut sup = vec![RunningStats::new(); nrec];
        let mut marg = vec![RunningStats::new(); nrec];
        let mut coarse = RunningStats::new();
        let mut excursions = 0;
        let mut replica_sup = Vec::with_capacity(reps.len());
        for r in &reps {
            for j in 0..nrec {
                sup[j].push(r.sup_sq[j]);
                marg[j].push(r.marginal_sq[j]);
            }
            coarse.push(r.coarse_sup_sq);
            excursions += r.excursions;
            replica_sup.push(r.sup_sq.last().copied().unwrap_or(0.0).sqrt());
        }
        let total_steps = (cfg.n_steps() * cfg.n_replicas) as u64;
        Self {
            horizon: cfg.n_steps() as f64 * cfg.dt,
            dt: cfg.dt,
            n_replicas: cfg.n_replicas,
            seed: cfg.seed,
            coupling: cfg.coupling,
            times: record.iter().map(|&k| k as f64 * cfg.dt).collect(),
            mean_sq_sup: sup.iter().map(|s| s.mean()).collect(),
            se_sup: sup.iter().map(se_or_zero).collect(),
            marginal_mse: marg.iter().map(|s| s.mean()).collect(),
            se_marginal: marg.iter().map(se_or_zero).collect(),
            replica_sup,
            coarse_stride: cfg.coarse_stride,
            mean_sq_sup_coarse: coarse.mean(),
            se_sup_coarse: se_or_zero(&coarse),
            excursions,
            total_steps,
            unreliable: excursions as f64 > EXCURSION_LIMIT * total_steps.max(1) as f64,
        }
    }

    /// Mean squared sup-error and its standard error at the horizon.
    pub fn final_sup(&self) -> (f64, f64) {
        (
            *self.mean_sq_sup.last().unwrap_or(&0.0),
            *self.se_sup.last().unwrap_or(&0.0),
        )
    }

    /// Index of the recording time closest to `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(i, _)| i)
    }

    /// CSV with header `t,mean_sq_sup,se_sup,marginal_mse,se_marginal,excursions`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "t",
            "mean_sq_sup",
            "se_sup",
            "marginal_mse",
            "se_marginal",
            "excursions",
        ])
        .map_err(csv_err)?;
        for i in 0..self.times.len() {
            w.write_record(&[
                self.times[i].to_string(),
                self.mean_sq_sup[i].to_string(),
                self.se_sup[i].to_string(),
                self.marginal_mse[i].to_string(),
                self.se_marginal[i].to_string(),
                self.excursions.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn se_or_zero(s: &RunningStats) -> f64 {
    if s.count() < 2 {
        0.0
    } else {
        s.stderr()
    }
}

/// Co-simulates `x` and `z` from `z(0) = ξ(x(0))` up to the horizon.
pub fn cosimulate(
    spec: &SystemSpec,
    model: &EffectiveModel,
    cfg: &CosimConfig,
    x0: &X0Source,
) -> Result<PathwiseErrorReport> {
    cfg.validate()?;
    let record = cfg.schedule();
    let reps = run_all(spec, model, cfg, x0, &record)?;
    Ok(PathwiseErrorReport::from_replicas(cfg, &record, reps))
}

/// Marginal mean-square error at the times of `t_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub times: Vec<f64>,
    pub mse: Vec<f64>,
    pub se: Vec<f64>,
    pub excursions: u64,
    pub unreliable: bool,
}

/// `E|ξ(x(t)) − z(t)|²` on `t_grid` (times rounded to the step grid; the
/// horizon of `cfg` is replaced by the largest requested time).
pub fn marginal_mse_experiment(
    spec: &SystemSpec,
    model: &EffectiveModel,
    cfg: &CosimConfig,
    x0: &X0Source,
    t_grid: &[f64],
) -> Result<MarginalReport> {
    if t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Config("times must be finite and nonnegative".into()));
    }
    let mut steps: Vec<usize> = t_grid.iter().map(|t| (t / cfg.dt).round() as usize).collect();
    steps.sort_unstable();
    steps.dedup();
    let cfg = CosimConfig {
        horizon: steps.last().copied().unwrap_or(0) as f64 * cfg.dt,
        ..cfg.clone()
    };
    cfg.validate()?;
    let reps = run_all(spec, model, &cfg, x0, &steps)?;
    let report = PathwiseErrorReport::from_replicas(&cfg, &steps, reps);
    Ok(MarginalReport {
        times: report.times,
        mse: report.marginal_mse,
        se: report.se_marginal,
        excursions: report.excursions,
        unreliable: report.unreliable,
    })
}

/// Empirical quadratic covariation `Σ dw̃ dw̃ᵀ` along one path of the full
/// dynamics, with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariation {
    pub t: f64,
    pub matrix: Matrix,
    pub stderr: Matrix,
}

pub fn quadratic_covariation(
    spec: &SystemSpec,
    x0: &Vector,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Covariation> {
    let m = spec.m();
    let mut noise = NoiseStream::new(seed, 0, StreamPurpose::Dynamics, spec.noise_dim());
    let mut stats = vec![RunningStats::new(); m * m];
    let mut x = x0.clone();
    for k in 0..n_steps {
        let dw = noise.increment(k as u64, dt);
        let w = coupled_noise_increment(spec, &x, &dw)?;
        for i in 0..m {
            for j in 0..m {
                stats[i + m * j].push(w[i] * w[j]);
            }
        }
        x = em_step_at(spec, &x, &dw, dt, k + 1)?;
    }
    let n = n_steps as f64;
    let matrix = Matrix::from_iterator(m, m, stats.iter().map(|s| s.mean() * n));
    let stderr = Matrix::from_iterator(m, m, stats.iter().map(|s| s.stderr() * n));
    Ok(Covariation {
        t: n * dt,
        matrix,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::ZGrid;
    use crate::systems::{build, SystemParams};

    #[test]
    fn identity_coordinates_take_leading_noise() {
        let spec = build(&SystemParams::named("ou2d")).unwrap().spec;
        let dw = Vector::from_vec(vec![0.3, -1.2]);
        let w = coupled_noise_increment(&spec, &Vector::from_vec(vec![0.5, 2.0]), &dw).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn radial_increment_is_the_radial_component() {
        let spec = build(&SystemParams::named("radial2d")).unwrap().spec;
        let x = Vector::from_vec(vec![0.6, -0.9]);
        let dw = Vector::from_vec(vec![0.7, 0.2]);
        let w = coupled_noise_increment(&spec, &x, &dw).unwrap();
        assert!((w[0] - x.normalize().dot(&dw)).abs() < 1e-14);
    }

    #[test]
    fn zero_horizon_has_zero_error() {
        let sys = build(&SystemParams::named("case2-linear")).unwrap();
        let grid = ZGrid::uniform(&[(-4.0, 4.0, 41)]).unwrap();
        let model = EffectiveModel::from_fn(grid, 1.0, |z| -z.clone(), |_| Matrix::identity(1, 1)).unwrap();
        let cfg = CosimConfig::new(0.01, 0.0, 8, 1);
        let rep = cosimulate(&sys.spec, &model, &cfg, &X0Source::Equilibrium(sys.sampler.clone())).unwrap();
        assert_eq!(rep.final_sup(), (0.0, 0.0));
        assert_eq!(rep.times, vec![0.0]);
    }

    #[test]
    fn report_is_deterministic_and_ordered() {
        let sys = build(&SystemParams::named("case2-linear")).unwrap();
        let grid = ZGrid::uniform(&[(-4.0, 4.0, 41)]).unwrap();
        let model = EffectiveModel::from_fn(grid, 1.0, |z| -z.clone(), |_| Matrix::identity(1, 1)).unwrap();
        let mut cfg = CosimConfig::new(0.01, 0.5, 20, 7);
        cfg.record_every = 10;
        let x0 = X0Source::Equilibrium(sys.sampler.clone());
        let a = cosimulate(&sys.spec, &model, &cfg, &x0).unwrap();
        let b = cosimulate(&sys.spec, &model, &cfg, &x0).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_sq_sup.windows(2).all(|w| w[1] >= w[0]));
        for i in 0..a.times.len() {
            assert!(a.marginal_mse[i] <= a.mean_sq_sup[i]);
        }
        assert!(a.mean_sq_sup_coarse <= a.final_sup().0);
    }

    #[test]
    fn csv_has_expected_header() {
        let sys = build(&SystemParams::named("ou2d")).unwrap();
        let grid = ZGrid::uniform(&[(-5.0, 5.0, 21)]).unwrap();
        let model = EffectiveModel::from_fn(grid, 1.0, |z| -z.clone(), |_| Matrix::identity(1, 1)).unwrap();
        let mut cfg = CosimConfig::new(0.01, 0.1, 4, 1);
        cfg.record_every = 5;
        let rep = cosimulate(&sys.spec, &model, &cfg, &X0Source::Equilibrium(sys.sampler.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("t,mean_sq_sup,se_sup,marginal_mse,se_marginal,excursions\n"));
        assert_eq!(text.lines().count(), 1 + rep.times.len());
        // separable V and exact coefficients: ξ(x) and z coincide up to rounding
        assert!(rep.final_sup().0 < 1e-20);
    }
}
