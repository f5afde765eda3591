//! Built-in test systems, addressable by name.
//!
//! | name                        | n | m | potential                                   | mobility        | ξ            |
//! |-----------------------------|---|---|---------------------------------------------|-----------------|--------------|
//! | `ou2d`                      | 2 | 1 | `|x|²/2`                                    | `I`             | `x₁`         |
//! | `case1-linear`              | 2 | 1 | `z²/2 + c(y−z)²/2 + K y²/(2ε)`              | `I`             | `x₁`         |
//! | `case2-linear`              | 2 | 1 | `z²/2 + c(y−z)²/2`                          | `diag(1, 1/δ)`  | `x₁`         |
//! | `case3-linear`              | 2 | 1 | `z²/2 + c(y−z)²/2 + K y²/(2ε)`              | `diag(1, 1/δ)`  | `x₁`         |
//! | `radial2d`                  | 2 | 1 | `k(|x|² − 1)²`                              | `diag(1, α)`    | `|x|`        |
//! | `polar-pair`                | 4 | 2 | `k(|x₁₂|² − 1)² + k(|x₃₄|² − 1)²`           | `I`             | `(r₁, r₂)`   |
//! | `frobenius-counterexample`  | 3 | 2 | `|x|²/2`                                    | `I`             | `(x₁, x₂ + x₁x₃)` |
//!
//! Every system comes with an exact equilibrium sampler; systems whose level
//! sets are easy to parameterize also carry a [`FiberChart`].

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Matrix, SystemSpec, Vector};
use crate::rng::{normal_pair, uniform};

pub const NAMES: &[&str] = &[
    "ou2d",
    "case1-linear",
    "case2-linear",
    "case3-linear",
    "radial2d",
    "polar-pair",
    "frobenius-counterexample",
];

/// Parameters of the built-in systems. Unused fields are ignored by systems
/// that do not depend on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    pub name: String,
    pub beta: f64,
    /// Stiffness scale `ε` of the fast potential.
    pub epsilon: f64,
    /// Mobility scale `δ` of the fast direction.
    pub delta: f64,
    /// Convexity `K` of the fast potential.
    pub k: f64,
    /// Coupling `c` between slow and fast coordinates.
    pub coupling: f64,
    /// Radial well stiffness `k` for `radial2d` and `polar-pair`.
    pub radial_stiffness: f64,
    /// Second diagonal entry of the mobility for `radial2d`.
    pub anisotropy: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            name: "radial2d".into(),
            beta: 1.0,
            epsilon: 1.0,
            delta: 1.0,
            k: 1.0,
            coupling: 1.0,
            radial_stiffness: 4.0,
            anisotropy: 1.0,
        }
    }
}

impl SystemParams {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn with(mut self, parameter: &str, value: f64) -> Result<Self> {
        match parameter {
            "beta" => self.beta = value,
            "epsilon" => self.epsilon = value,
            "delta" => self.delta = value,
            "k" => self.k = value,
            "coupling" => self.coupling = value,
            "radial_stiffness" => self.radial_stiffness = value,
            "anisotropy" => self.anisotropy = value,
            other => return Err(Error::Config(format!("unknown system parameter `{other}`"))),
        }
        Ok(self)
    }
}

/// One axis of a level-set parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartAxis {
    pub lo: f64,
    pub hi: f64,
    pub periodic: bool,
}

type AxesFn = Arc<dyn Fn(&Vector) -> Vec<ChartAxis> + Send + Sync>;
type EmbedFn = Arc<dyn Fn(&Vector, &[f64]) -> Vector + Send + Sync>;

/// A parameterization `s ↦ x(z, s)` of the level set `Σ_z` over a box of
/// parameters. Open axes are truncated to a range that carries essentially
/// all of the conditional mass.
#[derive(Clone)]
pub struct FiberChart {
    axes: AxesFn,
    embed: EmbedFn,
    dim: usize,
}

impl fmt::Debug for FiberChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiberChart")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl FiberChart {
    pub fn new(
        dim: usize,
        axes: impl Fn(&Vector) -> Vec<ChartAxis> + Send + Sync + 'static,
        embed: impl Fn(&Vector, &[f64]) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            axes: Arc::new(axes),
            embed: Arc::new(embed),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axes(&self, z: &Vector) -> Vec<ChartAxis> {
        (self.axes)(z)
    }

    pub fn embed(&self, z: &Vector, s: &[f64]) -> Vector {
        (self.embed)(z, s)
    }

    /// `∂x/∂s` as an `n × dim` matrix (central differences).
    pub fn tangents(&self, z: &Vector, s: &[f64]) -> Matrix {
        let mut cols = Vec::with_capacity(self.dim);
        let mut probe = s.to_vec();
        for k in 0..self.dim {
            let h = 1e-6 * s[k].abs().max(1.0);
            probe[k] = s[k] + h;
            let xp = self.embed(z, &probe);
            probe[k] = s[k] - h;
            let xm = self.embed(z, &probe);
            probe[k] = s[k];
            cols.push((xp - xm) / (2.0 * h));
        }
        Matrix::from_columns(&cols)
    }

    /// A point on `Σ_z`, at the centre of the parameter box.
    pub fn centre(&self, z: &Vector) -> Vector {
        let s: Vec<f64> = self.axes(z).iter().map(|a| 0.5 * (a.lo + a.hi)).collect();
        self.embed(z, &s)
    }
}

pub type EquilibriumSampler = Arc<dyn Fn(&mut dyn RngCore) -> Vector + Send + Sync>;

/// A system plus the auxiliary structure used by oracles and experiments.
#[derive(Clone)]
pub struct BuiltinSystem {
    pub spec: SystemSpec,
    pub params: SystemParams,
    pub chart: Option<FiberChart>,
    /// Draws exactly from `μ`.
    pub sampler: EquilibriumSampler,
    /// Box in z-space outside which the marginal density is negligible.
    pub support: Vec<(f64, f64)>,
}

impl fmt::Debug for BuiltinSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BuiltinSystem")
            .field("spec", &self.spec)
            .field("params", &self.params)
            .field("chart", &self.chart)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

impl BuiltinSystem {
    pub fn sample_equilibrium(&self, rng: &mut dyn RngCore) -> Vector {
        (self.sampler)(rng)
    }
}

/// Builds a built-in system from its parameters.
pub fn build(params: &SystemParams) -> Result<BuiltinSystem> {
    check_positive("beta", params.beta)?;
    match params.name.as_str() {
        "ou2d" => linear_family(params, 0.0, 1.0, 1.0),
        "case1-linear" => {
            check_positive("epsilon", params.epsilon)?;
            check_positive("k", params.k)?;
            linear_family(params, params.coupling, params.k / params.epsilon, 1.0)
        }
        "case2-linear" => {
            check_positive("delta", params.delta)?;
            linear_family(params, params.coupling, 0.0, params.delta)
        }
        "case3-linear" => {
            check_positive("epsilon", params.epsilon)?;
            check_positive("delta", params.delta)?;
            check_positive("k", params.k)?;
            linear_family(params, params.coupling, params.k / params.epsilon, params.delta)
        }
        "radial2d" => radial2d(params),
        "polar-pair" => polar_pair(params),
        "frobenius-counterexample" => frobenius_counterexample(params.beta),
        other => Err(Error::Config(format!(
            "unknown system `{other}` (known: {})",
            NAMES.join(", ")
        ))),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "system parameter `{name}` must be positive, got {v}"
        )))
    }
}

/// `V = z²/2 + c(y−z)²/2 + s·y²/2`, `a = diag(1, 1/δ)`, `ξ = x₁`.
fn linear_family(params: &SystemParams, c: f64, s: f64, delta: f64) -> Result<BuiltinSystem> {
    let beta = params.beta;
    // Hessian of V in (z, y).
    let (hzz, hzy, hyy) = (1.0 + c, -c, c + s);
    let det = hzz * hyy - hzy * hzy;
    if !(hzz > 0.0 && det > 0.0) {
        return Err(Error::Config(format!(
            "potential is not confining for coupling {c} and stiffness {s}"
        )));
    }
    let spec = SystemSpec::builder(2, 1)
        .name(params.name.clone())
        .beta(beta)
        .potential(move |x| 0.5 * x[0] * x[0] + 0.5 * c * (x[1] - x[0]).powi(2) + 0.5 * s * x[1] * x[1])
        .potential_grad(move |x| Vector::from_vec(vec![x[0] - c * (x[1] - x[0]), c * (x[1] - x[0]) + s * x[1]]))
        .sigma(2, move |_| {
            Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1.0 / delta.sqrt()]))
        })
        .mobility(move |_| Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1.0 / delta])))
        .mobility_div(|_| Vector::zeros(2))
        .xi(|x| Vector::from_element(1, x[0]))
        .xi_jac(|_| Matrix::from_row_slice(1, 2, &[1.0, 0.0]))
        .xi_hess(|_, _| Matrix::zeros(2, 2))
        .c1(1.0f64.min(1.0 / delta))
        .build()?;

    // Covariance (H⁻¹)/β and its Cholesky factor.
    let czz = hyy / det / beta;
    let czy = -hzy / det / beta;
    let cyy = hzz / det / beta;
    let l11 = czz.sqrt();
    let l21 = czy / l11;
    let l22 = (cyy - l21 * l21).sqrt();
    let sampler: EquilibriumSampler = Arc::new(move |rng: &mut dyn RngCore| {
        let (g1, g2) = normal_pair(rng);
        Vector::from_vec(vec![l11 * g1, l21 * g1 + l22 * g2])
    });

    let cond_std = 1.0 / (beta * hyy).sqrt();
    let chart = FiberChart::new(
        1,
        move |z: &Vector| {
            let mean = c * z[0] / hyy;
            vec![ChartAxis {
                lo: mean - 14.0 * cond_std,
                hi: mean + 14.0 * cond_std,
                periodic: false,
            }]
        },
        |z: &Vector, s: &[f64]| Vector::from_vec(vec![z[0], s[0]]),
    );
    let zw = 12.0 * czz.sqrt();
    Ok(BuiltinSystem {
        spec,
        params: params.clone(),
        chart: Some(chart),
        sampler,
        support: vec![(-zw, zw)],
    })
}

/// Inverse-CDF sampler for `r ∈ [0, r_max]` with density `∝ r·exp(−βk(r² − 1)²)`.
fn radius_sampler(beta: f64, k: f64, r_max: f64) -> impl Fn(&mut dyn RngCore) -> f64 + Send + Sync {
    const N: usize = 20_000;
    let h = r_max / N as f64;
    let density = |r: f64| r * (-beta * k * (r * r - 1.0).powi(2)).exp();
    let mut cdf = vec![0.0; N + 1];
    for i in 1..=N {
        let (r0, r1) = ((i - 1) as f64 * h, i as f64 * h);
        cdf[i] = cdf[i - 1] + 0.5 * h * (density(r0) + density(r1));
    }
    let total = cdf[N];
    cdf.iter_mut().for_each(|c| *c /= total);
    move |rng: &mut dyn RngCore| {
        let u = uniform(rng);
        let i = cdf.partition_point(|&c| c <= u).clamp(1, N);
        let (c0, c1) = (cdf[i - 1], cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        ((i - 1) as f64 + t) * h
    }
}

fn radial_extent(beta: f64, k: f64) -> f64 {
    // βk(r² − 1)² = 60 at the outer edge.
    (1.0 + (60.0 / (beta * k)).sqrt()).sqrt()
}

/// `V = k(|x|² − 1)²`, `a = diag(1, α)`, `ξ = |x|`.
pub fn radial2d(params: &SystemParams) -> Result<BuiltinSystem> {
    let (beta, k, alpha) = (params.beta, params.radial_stiffness, params.anisotropy);
    check_positive("radial_stiffness", k)?;
    check_positive("anisotropy", alpha)?;
    let spec = SystemSpec::builder(2, 1)
        .name("radial2d")
        .beta(beta)
        .potential(move |x| k * (x.norm_squared() - 1.0).powi(2))
        .potential_grad(move |x| x * (4.0 * k * (x.norm_squared() - 1.0)))
        .sigma(2, move |_| {
            Matrix::from_diagonal(&Vector::from_vec(vec![1.0, alpha.sqrt()]))
        })
        .mobility(move |_| Matrix::from_diagonal(&Vector::from_vec(vec![1.0, alpha])))
        .mobility_div(|_| Vector::zeros(2))
        .xi(|x| Vector::from_element(1, x.norm()))
        .xi_jac(|x| Matrix::from_row_slice(1, 2, &[x[0] / x.norm(), x[1] / x.norm()]))
        .xi_hess(|x, _| {
            let r = x.norm();
            let u = x / r;
            (Matrix::identity(2, 2) - &u * u.transpose()) / r
        })
        .c1(1.0f64.min(alpha))
        .probe_point(Vector::from_vec(vec![0.6, 0.8]))
        .build()?;
    let r_max = radial_extent(beta, k);
    let draw_r = radius_sampler(beta, k, r_max);
    let sampler: EquilibriumSampler = Arc::new(move |rng: &mut dyn RngCore| {
        let r = draw_r(rng);
        let theta = TAU * uniform(rng);
        Vector::from_vec(vec![r * theta.cos(), r * theta.sin()])
    });
    let chart = FiberChart::new(
        1,
        |_: &Vector| {
            vec![ChartAxis {
                lo: 0.0,
                hi: TAU,
                periodic: true,
            }]
        },
        |z: &Vector, s: &[f64]| Vector::from_vec(vec![z[0] * s[0].cos(), z[0] * s[0].sin()]),
    );
    Ok(BuiltinSystem {
        spec,
        params: params.clone(),
        chart: Some(chart),
        sampler,
        support: vec![(0.0, r_max)],
    })
}

/// Two independent radial wells; `ξ = (|x₁₂|, |x₃₄|)` is integrable.
fn polar_pair(params: &SystemParams) -> Result<BuiltinSystem> {
    let (beta, k) = (params.beta, params.radial_stiffness);
    check_positive("radial_stiffness", k)?;
    let radii = |x: &Vector| ((x[0] * x[0] + x[1] * x[1]).sqrt(), (x[2] * x[2] + x[3] * x[3]).sqrt());
    let spec = SystemSpec::builder(4, 2)
        .name("polar-pair")
        .beta(beta)
        .potential(move |x| {
            let (r1, r2) = radii(x);
            k * ((r1 * r1 - 1.0).powi(2) + (r2 * r2 - 1.0).powi(2))
        })
        .potential_grad(move |x| {
            let (r1, r2) = radii(x);
            let (g1, g2) = (4.0 * k * (r1 * r1 - 1.0), 4.0 * k * (r2 * r2 - 1.0));
            Vector::from_vec(vec![g1 * x[0], g1 * x[1], g2 * x[2], g2 * x[3]])
        })
        .mobility(|_| Matrix::identity(4, 4))
        .mobility_div(|_| Vector::zeros(4))
        .xi(move |x| {
            let (r1, r2) = radii(x);
            Vector::from_vec(vec![r1, r2])
        })
        .xi_jac(move |x| {
            let (r1, r2) = radii(x);
            Matrix::from_row_slice(2, 4, &[x[0] / r1, x[1] / r1, 0.0, 0.0, 0.0, 0.0, x[2] / r2, x[3] / r2])
        })
        .xi_hess(move |x, i| {
            let off = 2 * i;
            let r = (x[off] * x[off] + x[off + 1] * x[off + 1]).sqrt();
            let (u0, u1) = (x[off] / r, x[off + 1] / r);
            let mut h = Matrix::zeros(4, 4);
            h[(off, off)] = (1.0 - u0 * u0) / r;
            h[(off + 1, off + 1)] = (1.0 - u1 * u1) / r;
            h[(off, off + 1)] = -u0 * u1 / r;
            h[(off + 1, off)] = -u0 * u1 / r;
            h
        })
        .c1(1.0)
        .build()?;
    let r_max = radial_extent(beta, k);
    let draw_r = radius_sampler(beta, k, r_max);
    let sampler: EquilibriumSampler = Arc::new(move |rng: &mut dyn RngCore| {
        let mut x = Vector::zeros(4);
        for p in 0..2 {
            let r = draw_r(rng);
            let th = TAU * uniform(rng);
            x[2 * p] = r * th.cos();
            x[2 * p + 1] = r * th.sin();
        }
        x
    });
    let chart = FiberChart::new(
        2,
        |_: &Vector| {
            let ax = ChartAxis {
                lo: 0.0,
                hi: TAU,
                periodic: true,
            };
            vec![ax, ax]
        },
        |z: &Vector, s: &[f64]| {
            Vector::from_vec(vec![
                z[0] * s[0].cos(),
                z[0] * s[0].sin(),
                z[1] * s[1].cos(),
                z[1] * s[1].sin(),
            ])
        },
    );
    Ok(BuiltinSystem {
        spec,
        params: params.clone(),
        chart: Some(chart),
        sampler,
        support: vec![(0.0, r_max), (0.0, r_max)],
    })
}

/// `ξ = (x₁, x₂ + x₁x₃)` in ℝ³ with `a = I`: the commutator of `∇ξ₁` and
/// `∇ξ₂` leaves the span, so no complementary coordinate exists.
pub fn frobenius_counterexample(beta: f64) -> Result<BuiltinSystem> {
    let spec = SystemSpec::builder(3, 2)
        .name("frobenius-counterexample")
        .beta(beta)
        .potential(|x| 0.5 * x.norm_squared())
        .potential_grad(|x| x.clone())
        .mobility(|_| Matrix::identity(3, 3))
        .mobility_div(|_| Vector::zeros(3))
        .xi(|x| Vector::from_vec(vec![x[0], x[1] + x[0] * x[2]]))
        .xi_jac(|x| Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, x[2], 1.0, x[0]]))
        .xi_hess(|_, i| {
            let mut h = Matrix::zeros(3, 3);
            if i == 1 {
                h[(0, 2)] = 1.0;
                h[(2, 0)] = 1.0;
            }
            h
        })
        .c1(1.0)
        .build()?;
    let std = 1.0 / beta.sqrt();
    let sampler: EquilibriumSampler = Arc::new(move |rng: &mut dyn RngCore| {
        let (a, b) = normal_pair(rng);
        let (c, _) = normal_pair(rng);
        Vector::from_vec(vec![a * std, b * std, c * std])
    });
    let chart = FiberChart::new(
        1,
        move |_: &Vector| {
            vec![ChartAxis {
                lo: -14.0 * std,
                hi: 14.0 * std,
                periodic: false,
            }]
        },
        |z: &Vector, s: &[f64]| Vector::from_vec(vec![z[0], z[1] - z[0] * s[0], s[0]]),
    );
    Ok(BuiltinSystem {
        params: SystemParams {
            name: "frobenius-counterexample".into(),
            beta,
            ..Default::default()
        },
        spec,
        chart: Some(chart),
        sampler,
        support: vec![(-12.0 * std, 12.0 * std), (-40.0 * std, 40.0 * std)],
    })
}
