//! Euler–Maruyama integrators for the full dynamics and for the fiber
//! dynamics constrained to a level set `Σ_z`.
//!
//! The fiber dynamics uses the mobility `Πᵀa`, which annihilates `∇ξ`, so in
//! continuous time `ξ` is conserved and `μ_z` is invariant. After each
//! discrete step the state is pulled back onto `Σ_z` by a Newton iteration
//! along the columns of `a∇ξᵀ`.

use std::path::Path;

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LevelSetFrame;
use crate::model::{fd_matrix_derivatives, Matrix, SystemSpec, Vector};
use crate::rng::{seeded, NoiseStream, StreamPurpose};
use crate::systems::EquilibriumSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Total number of steps, burn-in included.
    pub n_steps: usize,
    #[serde(default = "one")]
    pub n_replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to 10% of `n_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in_steps: Option<usize>,
    #[serde(default = "one")]
    pub thinning: usize,
}

fn one() -> usize {
    1
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_steps: 1000,
            n_replicas: 1,
            seed: 0,
            burn_in_steps: None,
            thinning: 1,
        }
    }
}

impl IntegratorConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in_steps.unwrap_or(self.n_steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        if self.n_replicas == 0 {
            return Err(Error::Config("n_replicas must be at least 1".into()));
        }
        if self.burn_in() > self.n_steps {
            return Err(Error::Config(format!(
                "burn-in {} exceeds n_steps {}",
                self.burn_in(),
                self.n_steps
            )));
        }
        Ok(())
    }

    /// Number of states a run records.
    pub fn recorded_len(&self) -> usize {
        (self.n_steps - self.burn_in()) / self.thinning + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberConfig {
    pub z: Vector,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub base: IntegratorConfig,
}

impl FiberConfig {
    pub fn new(z: Vector, base: IntegratorConfig) -> Self {
        Self {
            z,
            newton_tol: 1e-10,
            newton_max_iter: 10,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) {
            return Err(Error::Config("newton_tol must be positive".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::Config("newton_max_iter must be at least 1".into()));
        }
        self.base.validate()
    }
}

/// Where a replica's initial state comes from.
#[derive(Clone)]
pub enum X0Source {
    Fixed(Vector),
    /// Exact draws from `μ`, one per replica from its own stream.
    Equilibrium(EquilibriumSampler),
}

impl std::fmt::Debug for X0Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            X0Source::Fixed(x) => f.debug_tuple("Fixed").field(x).finish(),
            X0Source::Equilibrium(_) => f.write_str("Equilibrium(..)"),
        }
    }
}

impl X0Source {
    pub fn initial_state(&self, seed: u64, replica: usize) -> Vector {
        match self {
            X0Source::Fixed(x) => x.clone(),
            X0Source::Equilibrium(draw) => {
                let mut rng = seeded(seed, replica, StreamPurpose::Initial);
                draw(&mut rng as &mut dyn RngCore)
            }
        }
    }
}

fn check_finite(x: &Vector, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { replica: None, step })
    }
}

/// One Euler–Maruyama step `x + (−a∇V + β⁻¹∇·a) dt + √(2/β) σ dW`.
/// A non-finite result is reported as divergence at step 0; callers that
/// track step indices use [`em_step_at`].
pub fn em_step(spec: &SystemSpec, x: &Vector, dw: &Vector, dt: f64) -> Result<Vector> {
    em_step_at(spec, x, dw, dt, 0)
}

pub fn em_step_at(spec: &SystemSpec, x: &Vector, dw: &Vector, dt: f64, step: usize) -> Result<Vector> {
    if dw.len() != spec.noise_dim() {
        return Err(Error::Dimension {
            what: "Brownian increment",
            got: dw.len(),
            expected: spec.noise_dim(),
        });
    }
    let drift = spec.drift(x)?;
    let sigma = spec.sigma(x)?;
    let next = x + drift * dt + sigma * dw * (2.0 / spec.beta()).sqrt();
    check_finite(&next, step)?;
    Ok(next)
}

/// A recorded state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    /// Step index counted from the start of the run (burn-in included).
    pub step: usize,
    /// Time since the end of burn-in.
    pub t: f64,
    pub x: Vector,
    pub xi: Vector,
}

/// Lazily integrated path of the full dynamics for one replica.
pub struct FullPath<'a> {
    spec: &'a SystemSpec,
    cfg: IntegratorConfig,
    replica: usize,
    noise: NoiseStream,
    x: Vector,
    step: usize,
    emitted: bool,
    done: bool,
}

/// Runs the full dynamics for `replica`, yielding every `thinning`-th state
/// after burn-in. The path is a deterministic function of `(seed, replica)`.
pub fn simulate_full<'a>(
    spec: &'a SystemSpec,
    cfg: &IntegratorConfig,
    x0: &X0Source,
    replica: usize,
) -> Result<FullPath<'a>> {
    cfg.validate()?;
    let x = x0.initial_state(cfg.seed, replica);
    if x.len() != spec.n() {
        return Err(Error::Dimension {
            what: "initial state",
            got: x.len(),
            expected: spec.n(),
        });
    }
    Ok(FullPath {
        spec,
        cfg: cfg.clone(),
        replica,
        noise: NoiseStream::new(cfg.seed, replica, StreamPurpose::Dynamics, spec.noise_dim()),
        x,
        step: 0,
        emitted: false,
        done: false,
    })
}

impl FullPath<'_> {
    fn advance(&mut self) -> Result<()> {
        let dw = self.noise.increment(self.step as u64, self.cfg.dt);
        self.x = em_step_at(self.spec, &self.x, &dw, self.cfg.dt, self.step + 1)
            .map_err(|e| e.with_replica(self.replica))?;
        self.step += 1;
        Ok(())
    }

    fn is_recorded(&self) -> bool {
        let burn = self.cfg.burn_in();
        self.step >= burn && (self.step - burn).is_multiple_of(self.cfg.thinning)
    }
}

impl Iterator for FullPath<'_> {
    type Item = Result<TrajectoryPoint>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            if !self.emitted && self.is_recorded() {
                self.emitted = true;
                return Some(Ok(TrajectoryPoint {
                    step: self.step,
                    t: (self.step - self.cfg.burn_in()) as f64 * self.cfg.dt,
                    x: self.x.clone(),
                    xi: self.spec.xi(&self.x),
                }));
            }
            if self.step >= self.cfg.n_steps {
                self.done = true;
                return None;
            }
            if let Err(e) = self.advance() {
                self.done = true;
                return Some(Err(e));
            }
            self.emitted = false;
        }
    }
}

/// Result of [`project_to_fiber`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub x: Vector,
    pub iterations: usize,
}

/// Moves `x` onto `Σ_z` along `a∇ξᵀ` (evaluated at the starting point):
/// solves `ξ(x + a∇ξᵀλ) = z` for `λ ∈ ℝᵐ` by Newton's method.
pub fn project_to_fiber(spec: &SystemSpec, x: &Vector, z: &Vector, tol: f64, max_iter: usize) -> Result<Projection> {
    if z.len() != spec.m() {
        return Err(Error::Dimension {
            what: "fiber level",
            got: z.len(),
            expected: spec.m(),
        });
    }
    let mut residual = spec.xi(x) - z;
    if residual.norm() <= tol {
        return Ok(Projection {
            x: x.clone(),
            iterations: 0,
        });
    }
    let dir: Matrix = spec.mobility(x) * spec.xi_jac(x)?.transpose();
    let mut lambda = Vector::zeros(spec.m());
    let mut y = x.clone();
    for it in 1..=max_iter {
        let jac = spec.xi_jac(&y)? * &dir;
        let delta = jac.lu().solve(&residual).ok_or(Error::Projection {
            iterations: it,
            residual: residual.norm(),
        })?;
        lambda -= delta;
        y = x + &dir * &lambda;
        residual = spec.xi(&y) - z;
        let r = residual.norm();
        if !r.is_finite() {
            break;
        }
        if r <= tol {
            return Ok(Projection { x: y, iterations: it });
        }
    }
    Err(Error::Projection {
        iterations: max_iter,
        residual: residual.norm(),
    })
}

/// `∇·(Πᵀa)` by central differences of the fiber mobility.
pub fn fiber_mobility_div(spec: &SystemSpec, x: &Vector) -> Result<Vector> {
    let n = spec.n();
    let derivs = fd_matrix_derivatives(
        |p| match LevelSetFrame::new(spec, p) {
            Ok(f) => f.fiber_mobility(),
            Err(_) => Matrix::from_element(n, n, f64::NAN),
        },
        x,
    )?;
    let mut div = Vector::zeros(n);
    for (j, dj) in derivs.iter().enumerate() {
        div += dj.column(j);
    }
    Ok(div)
}

/// One unprojected step of the fiber dynamics
/// `x − Πᵀa∇V dt + β⁻¹∇·(Πᵀa) dt + √(2/β) Πᵀσ dW`.
pub fn fiber_em_step(spec: &SystemSpec, x: &Vector, dw: &Vector, dt: f64) -> Result<Vector> {
    let frame = LevelSetFrame::new(spec, x)?;
    let pit = frame.pi.transpose();
    let drift = -(&pit * (&frame.mobility * spec.potential_grad(x)?)) + fiber_mobility_div(spec, x)? / spec.beta();
    let noise = &pit * (spec.sigma(x)? * dw);
    Ok(x + drift * dt + noise * (2.0 / spec.beta()).sqrt())
}

/// Lazily integrated fiber path for one replica.
pub struct FiberPath<'a> {
    spec: &'a SystemSpec,
    fc: FiberConfig,
    replica: usize,
    noise: NoiseStream,
    x: Vector,
    step: usize,
    emitted: bool,
    done: bool,
}

/// Runs the projected fiber dynamics from `x0` (which must already lie on
/// `Σ_z` to within `newton_tol`). Every emitted sample lies on `Σ_z`.
pub fn simulate_fiber<'a>(
    spec: &'a SystemSpec,
    fc: &FiberConfig,
    x0: &Vector,
    replica: usize,
) -> Result<FiberPath<'a>> {
    fc.validate()?;
    let off = (spec.xi(x0) - &fc.z).norm();
    if off > fc.newton_tol {
        return Err(Error::Config(format!(
            "initial point is {off:e} away from the fiber; project it first"
        )));
    }
    Ok(FiberPath {
        spec,
        fc: fc.clone(),
        replica,
        noise: NoiseStream::new(fc.base.seed, replica, StreamPurpose::Dynamics, spec.noise_dim()),
        x: x0.clone(),
        step: 0,
        emitted: false,
        done: false,
    })
}

impl FiberPath<'_> {
    fn advance(&mut self) -> Result<()> {
        let dt = self.fc.base.dt;
        let dw = self.noise.increment(self.step as u64, dt);
        let free = fiber_em_step(self.spec, &self.x, &dw, dt)?;
        check_finite(&free, self.step + 1).map_err(|e| e.with_replica(self.replica))?;
        let proj = project_to_fiber(
            self.spec,
            &free,
            &self.fc.z,
            self.fc.newton_tol,
            self.fc.newton_max_iter,
        )?;
        self.x = proj.x;
        self.step += 1;
        Ok(())
    }
}

impl Iterator for FiberPath<'_> {
    type Item = Result<TrajectoryPoint>;

    fn next(&mut self) -> Option<Self::Item> {
        let (burn, thinning, n_steps, dt) = {
            let c = &self.fc.base;
            (c.burn_in(), c.thinning, c.n_steps, c.dt)
        };
        loop {
            if self.done {
                return None;
            }
            if !self.emitted && self.step >= burn && (self.step - burn).is_multiple_of(thinning) {
                self.emitted = true;
                return Some(Ok(TrajectoryPoint {
                    step: self.step,
                    t: (self.step - burn) as f64 * dt,
                    x: self.x.clone(),
                    xi: self.spec.xi(&self.x),
                }));
            }
            if self.step >= n_steps {
                self.done = true;
                return None;
            }
            if let Err(e) = self.advance() {
                self.done = true;
                return Some(Err(e));
            }
            self.emitted = false;
        }
    }
}

/// Writes recorded states as CSV with header `t,x1..xn,xi1..xim`.
pub fn write_trajectory_csv(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if let Some(p) = points.first() {
        let mut header = vec!["t".to_string()];
        header.extend((1..=p.x.len()).map(|i| format!("x{i}")));
        header.extend((1..=p.xi.len()).map(|i| format!("xi{i}")));
        w.write_record(&header).map_err(csv_err)?;
    }
    for p in points {
        let row = std::iter::once(p.t)
            .chain(p.x.iter().copied())
            .chain(p.xi.iter().copied());
        w.write_record(row.map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
