//! Closed-form pathwise and marginal error bounds.
//!
//! Every evaluator transcribes a displayed right-hand side with its constants
//! unchanged:
//!
//! | kind               | constants                                   | growth rate `L`                  |
//! |--------------------|---------------------------------------------|----------------------------------|
//! | `prop1`            | `3t/(βρ)`, `κ₁² t`, `32κ₂²/β`               | `3L_b² + 48L_σ²/β + 1`           |
//! | `thm1`             | `3t/(βρ)`, `27κ₁²/(2ρ)`, `32κ₂²/β`          | `3L_b² + 48L_σ²/β + 1`           |
//! | `thm2_density`     | `9κ₁/(√(2β)ρ)`, `12κ₂/(β√ρ)`                | `3/2 L_b² + 24L_σ²/β + 1/2`      |
//! | `thm2_fixed`       | as above, plus `3C₁√t₁`, `18C₂/√β`          | `3/2 L_b² + 24L_σ²/β + 1/2`      |
//! | `diss_contractive` | `κ₁²/(2v₁)`, `2κ₂²/β (1 + 1/v₂)`            | rate `C₁ = L_d − L_σ²(1+v₂)/β − v₁/2` |
//! | `diss_expansive`   | same bracket                                | rate `C₂ = L_σ²(1+v₂)/β − L_d + v₁/2` |
//!
//! `prop1`, `thm1` and the dissipative kinds bound mean squared errors; the two
//! `thm2` kinds bound the (unsquared) mean sup-error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants feeding the bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub rho: f64,
    #[serde(default)]
    pub l_b: f64,
    #[serde(default)]
    pub l_sigma: f64,
    #[serde(default)]
    pub l_d: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    pub beta: f64,
    /// Uniform bound on `|Lξ − b̃∘ξ|`.
    #[serde(default)]
    pub c1_sup_phi: f64,
    /// Uniform bound on `‖A‖_F`.
    #[serde(default)]
    pub c2_sup_a: f64,
}

fn one() -> f64 {
    1.0
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("rho", self.rho),
            ("l_b", self.l_b),
            ("l_sigma", self.l_sigma),
            ("l_d", self.l_d),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("c1_sup_phi", self.c1_sup_phi),
            ("c2_sup_a", self.c2_sup_a),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Query(format!("{name} is not finite")));
            }
        }
        for (name, v) in [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("l_b", self.l_b),
            ("l_sigma", self.l_sigma),
            ("c1_sup_phi", self.c1_sup_phi),
            ("c2_sup_a", self.c2_sup_a),
        ] {
            if v < 0.0 {
                return Err(Error::Query(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [("rho", self.rho), ("alpha", self.alpha), ("beta", self.beta)] {
            if v <= 0.0 {
                return Err(Error::Query(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Growth rate shared by `prop1` and `thm1`.
    pub fn rate_squared(&self) -> f64 {
        3.0 * self.l_b.powi(2) + 48.0 * self.l_sigma.powi(2) / self.beta + 1.0
    }

    /// Growth rate shared by the two `thm2` kinds.
    pub fn rate_unsquared(&self) -> f64 {
        1.5 * self.l_b.powi(2) + 24.0 * self.l_sigma.powi(2) / self.beta + 0.5
    }

    fn thm2_prefactor(&self) -> f64 {
        9.0 * self.kappa1 / ((2.0 * self.beta).sqrt() * self.rho) + 12.0 * self.kappa2 / (self.beta * self.rho.sqrt())
    }

    fn diss_bracket(&self, v1: f64, v2: f64) -> f64 {
        self.kappa1.powi(2) / (2.0 * v1) + 2.0 * self.kappa2.powi(2) / self.beta * (1.0 + 1.0 / v2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Prop1,
    Thm1,
    Thm2Density,
    Thm2Fixed,
    DissContractive,
    DissExpansive,
}

impl BoundKind {
    pub const ALL: [BoundKind; 6] = [
        BoundKind::Prop1,
        BoundKind::Thm1,
        BoundKind::Thm2Density,
        BoundKind::Thm2Fixed,
        BoundKind::DissContractive,
        BoundKind::DissExpansive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Prop1 => "prop1",
            BoundKind::Thm1 => "thm1",
            BoundKind::Thm2Density => "thm2_density",
            BoundKind::Thm2Fixed => "thm2_fixed",
            BoundKind::DissContractive => "diss_contractive",
            BoundKind::DissExpansive => "diss_expansive",
        }
    }
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Query(format!("unknown bound kind `{s}`")))
    }
}

/// Kind-specific inputs; only the ones relevant to the requested kind are read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundExtras {
    /// `∫ (dμ̄/dμ)² dμ` for `thm2_density`.
    pub chi2: Option<f64>,
    pub t0: Option<f64>,
    pub t1: Option<f64>,
    /// `∫ p_{t₀}² dμ` for `thm2_fixed`.
    pub p_t0_sq: Option<f64>,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundQuery {
    pub kind: BoundKind,
    pub params: BoundParams,
    pub t: f64,
    pub extras: BoundExtras,
}

impl BoundQuery {
    pub fn new(kind: BoundKind, params: BoundParams, t: f64) -> Self {
        Self {
            kind,
            params,
            t,
            extras: BoundExtras::default(),
        }
    }

    pub fn with_extras(mut self, extras: BoundExtras) -> Self {
        self.extras = extras;
        self
    }
}

fn require(v: Option<f64>, name: &str, kind: BoundKind) -> Result<f64> {
    match v {
        Some(x) if x.is_finite() => Ok(x),
        Some(x) => Err(Error::Query(format!("{name} = {x} is not finite"))),
        None => Err(Error::Query(format!("{} requires `{name}`", kind.name()))),
    }
}

fn require_positive(v: Option<f64>, name: &str, kind: BoundKind) -> Result<f64> {
    let x = require(v, name, kind)?;
    if x <= 0.0 {
        return Err(Error::Query(format!("{name} must be positive, got {x}")));
    }
    Ok(x)
}

/// Evaluates the bound selected by `q.kind` at time `q.t`.
pub fn theorem_bound(q: &BoundQuery) -> Result<f64> {
    let p = &q.params;
    p.validate()?;
    let t = q.t;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Query(format!("t must be finite and nonnegative, got {t}")));
    }
    let x = &q.extras;
    match q.kind {
        BoundKind::Prop1 => Ok(3.0 * t / (p.beta * p.rho)
            * (p.kappa1.powi(2) * t + 32.0 * p.kappa2.powi(2) / p.beta)
            * (p.rate_squared() * t).exp()),
        BoundKind::Thm1 => Ok(3.0 * t / (p.beta * p.rho)
            * (27.0 * p.kappa1.powi(2) / (2.0 * p.rho) + 32.0 * p.kappa2.powi(2) / p.beta)
            * (p.rate_squared() * t).exp()),
        BoundKind::Thm2Density => {
            let chi2 = require(x.chi2, "chi2", q.kind)?;
            if chi2 < 0.0 {
                return Err(Error::Query(format!("chi2 must be nonnegative, got {chi2}")));
            }
            Ok(t.sqrt() * p.thm2_prefactor() * chi2.sqrt() * (p.rate_unsquared() * t).exp())
        }
        BoundKind::Thm2Fixed => {
            let t0 = require_positive(x.t0, "t0", q.kind)?;
            let t1 = require(x.t1, "t1", q.kind)?;
            let p_sq = require(x.p_t0_sq, "p_t0_sq", q.kind)?;
            if p_sq < 0.0 {
                return Err(Error::Query(format!("p_t0_sq must be nonnegative, got {p_sq}")));
            }
            if !(t0 <= t1 && t1 <= t) {
                return Err(Error::Query(format!(
                    "thm2_fixed needs 0 < t0 ≤ t1 ≤ t, got t0 = {t0}, t1 = {t1}, t = {t}"
                )));
            }
            Ok(thm2_fixed_value(p, t, t0, t1, p_sq))
        }
        BoundKind::DissContractive => {
            let (v1, v2) = (
                require_positive(x.v1, "v1", q.kind)?,
                require_positive(x.v2, "v2", q.kind)?,
            );
            diss_contractive(p, v1, v2, t)
        }
        BoundKind::DissExpansive => {
            let (v1, v2) = (
                require_positive(x.v1, "v1", q.kind)?,
                require_positive(x.v2, "v2", q.kind)?,
            );
            diss_expansive(p, v1, v2, t)
        }
    }
}

fn thm2_fixed_value(p: &BoundParams, t: f64, t0: f64, t1: f64, p_sq: f64) -> f64 {
    let relax = 1.0 + (-p.alpha * (t1 - t0)).exp() * p_sq.sqrt();
    let head = t1.sqrt() * (3.0 * p.c1_sup_phi * t1.sqrt() + 18.0 * p.c2_sup_a / p.beta.sqrt());
    (t.sqrt() * p.thm2_prefactor() * relax + head) * (p.rate_unsquared() * t).exp()
}

fn diss_contractive(p: &BoundParams, v1: f64, v2: f64, t: f64) -> Result<f64> {
    let threshold = p.l_sigma.powi(2) / p.beta;
    if p.l_d <= threshold {
        return Err(Error::Regime(format!(
            "contractive bound needs L_d > L_σ²/β, got L_d = {} ≤ {threshold}",
            p.l_d
        )));
    }
    let c1 = p.l_d - p.l_sigma.powi(2) * (1.0 + v2) / p.beta - v1 / 2.0;
    if c1 <= 0.0 {
        return Err(Error::Query(format!(
            "v1 = {v1}, v2 = {v2} give a nonpositive contraction rate {c1}"
        )));
    }
    Ok(1.0 / (c1 * p.beta * p.rho) * p.diss_bracket(v1, v2) * -(-2.0 * c1 * t).exp_m1())
}

fn diss_expansive(p: &BoundParams, v1: f64, v2: f64, t: f64) -> Result<f64> {
    if p.l_d > p.l_sigma.powi(2) / p.beta {
        return Err(Error::Regime(format!(
            "expansive bound applies when L_d ≤ L_σ²/β, got L_d = {}",
            p.l_d
        )));
    }
    let c2 = p.l_sigma.powi(2) * (1.0 + v2) / p.beta - p.l_d + v1 / 2.0;
    Ok(1.0 / (c2 * p.beta * p.rho) * p.diss_bracket(v1, v2) * (2.0 * c2 * t).exp_m1())
}

/// Minimizer of a bound over a free parameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimized {
    pub value: f64,
    pub argmin: (f64, f64),
}

/// Minimizes `thm2_fixed` over the supplied `t1` values; entries outside `[t0, t]` are skipped.
pub fn thm2_fixed_min_over_t1(q: &BoundQuery, t1_grid: &[f64]) -> Result<Minimized> {
    if q.kind != BoundKind::Thm2Fixed {
        return Err(Error::Query("t1 minimization applies to thm2_fixed only".into()));
    }
    let mut best: Option<Minimized> = None;
    for &t1 in t1_grid {
        let mut qq = *q;
        qq.extras.t1 = Some(t1);
        let value = match theorem_bound(&qq) {
            Ok(v) => v,
            Err(Error::Query(_)) if t1.is_finite() => continue,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|b| value < b.value) {
            best = Some(Minimized {
                value,
                argmin: (t1, t1),
            });
        }
    }
    best.ok_or_else(|| Error::Query("no admissible t1 in the grid".into()))
}

/// Default `(v₁, v₂)` grid: `n` points per axis spaced evenly on `(0, 4]`.
pub fn v_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 4.0 * i as f64 / n as f64).collect()
}

/// Minimizes a dissipative bound over `(v₁, v₂) ∈ grid × grid`, skipping pairs
/// that leave the contraction rate nonpositive.
pub fn dissipative_min(p: &BoundParams, kind: BoundKind, t: f64, grid: &[f64]) -> Result<Minimized> {
    if !matches!(kind, BoundKind::DissContractive | BoundKind::DissExpansive) {
        return Err(Error::Query(format!("{} is not a dissipative bound", kind.name())));
    }
    let mut best: Option<Minimized> = None;
    for &v1 in grid {
        for &v2 in grid {
            let q = BoundQuery::new(kind, *p, t).with_extras(BoundExtras {
                v1: Some(v1),
                v2: Some(v2),
                ..Default::default()
            });
            let value = match theorem_bound(&q) {
                Ok(v) => v,
                Err(Error::Query(_)) => continue,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|b| value < b.value) {
                best = Some(Minimized {
                    value,
                    argmin: (v1, v2),
                });
            }
        }
    }
    best.ok_or_else(|| Error::Query("no (v1, v2) in the grid gives a positive rate".into()))
}

/// The two right-hand sides of the Gronwall-type comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GronwallBound {
    /// `g(t) e^{(C₁+C₂+1)t}`; valid when `g` is nondecreasing.
    pub nondecreasing: f64,
    /// `g(t) + (C₁+C₂) ∫₀ᵗ e^{(C₁+C₂+1)(t−s)} g(s) ds`, trapezoid rule on the table.
    pub integral: f64,
}

/// Evaluates both forms at the last abscissa of the table `(s_i, g_i)`, which
/// must start at 0 and be strictly increasing in `s`.
pub fn gronwall_bound(table: &[(f64, f64)], c1: f64, c2: f64) -> Result<GronwallBound> {
    if !(c1 >= 0.0 && c2 >= 0.0) {
        return Err(Error::Query(format!(
            "Gronwall constants must be nonnegative, got C1 = {c1}, C2 = {c2}"
        )));
    }
    let (first, last) = match (table.first(), table.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Query("empty g table".into())),
    };
    if first.0 != 0.0 {
        return Err(Error::Query(format!("g table must start at s = 0, got {}", first.0)));
    }
    if table.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Query("g table abscissae must be strictly increasing".into()));
    }
    if table.iter().any(|&(s, g)| !s.is_finite() || !g.is_finite() || g < 0.0) {
        return Err(Error::Query("g must be finite and nonnegative".into()));
    }
    let t = last.0;
    let c = c1 + c2;
    let rate = c + 1.0;
    let integrand = |(s, g): (f64, f64)| (rate * (t - s)).exp() * g;
    let integral: f64 = table
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (integrand(w[0]) + integrand(w[1])))
        .sum();
    Ok(GronwallBound {
        nondecreasing: last.1 * (rate * t).exp(),
        integral: last.1 + c * integral,
    })
}

/// Ordinary least-squares fit of `ln y = intercept + slope · ln x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

pub fn fit_scaling(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points
        .iter()
        .find(|&&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::Fit(format!("nonpositive or non-finite point ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all parameters coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(PowerLawFit {
        slope,
        stderr,
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn unit() -> BoundParams {
        BoundParams {
            kappa1: 1.0,
            kappa2: 0.0,
            rho: 1.0,
            l_b: 0.0,
            l_sigma: 0.0,
            l_d: 1.0,
            alpha: 1.0,
            beta: 1.0,
            c1_sup_phi: 0.0,
            c2_sup_a: 0.0,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn hand_examples() {
        let thm1 = theorem_bound(&BoundQuery::new(BoundKind::Thm1, unit(), 1.0)).unwrap();
        assert!(rel(thm1, 40.5 * E) < 1e-12);
        let prop1 = theorem_bound(&BoundQuery::new(BoundKind::Prop1, unit(), 1.0)).unwrap();
        assert!(rel(prop1, 3.0 * E) < 1e-12);
        let diss = theorem_bound(&BoundQuery::new(BoundKind::DissContractive, unit(), 200.0).with_extras(
            BoundExtras {
                v1: Some(1.0),
                v2: Some(1.0),
                ..Default::default()
            },
        ))
        .unwrap();
        assert!(rel(diss, 1.0) < 1e-12);
    }

    #[test]
    fn zero_kappas_give_zero() {
        let mut p = unit();
        p.kappa1 = 0.0;
        p.l_b = 0.7;
        p.l_sigma = 0.3;
        let extras = BoundExtras {
            chi2: Some(2.0),
            t0: Some(0.5),
            t1: Some(0.5),
            p_t0_sq: Some(3.0),
            v1: Some(0.5),
            v2: Some(0.5),
        };
        for kind in BoundKind::ALL {
            let mut pp = p;
            if kind == BoundKind::DissExpansive {
                pp.l_d = 0.0;
            }
            let q = BoundQuery::new(kind, pp, 2.0).with_extras(extras);
            assert_eq!(theorem_bound(&q).unwrap(), 0.0, "{}", kind.name());
        }
    }

    #[test]
    fn missing_extras_and_regimes() {
        for kind in [BoundKind::Thm2Density, BoundKind::Thm2Fixed, BoundKind::DissContractive] {
            let q = BoundQuery::new(kind, unit(), 1.0);
            assert!(matches!(theorem_bound(&q), Err(Error::Query(_))));
        }
        let mut p = unit();
        p.l_d = 0.5;
        p.l_sigma = 1.0;
        let q = BoundQuery::new(BoundKind::DissContractive, p, 1.0).with_extras(BoundExtras {
            v1: Some(0.1),
            v2: Some(0.1),
            ..Default::default()
        });
        assert!(matches!(theorem_bound(&q), Err(Error::Regime(_))));
        let q = BoundQuery::new(BoundKind::Thm2Fixed, unit(), 1.0).with_extras(BoundExtras {
            t0: Some(0.5),
            t1: Some(2.0),
            p_t0_sq: Some(1.0),
            ..Default::default()
        });
        assert!(matches!(theorem_bound(&q), Err(Error::Query(_))));
    }

    #[test]
    fn thm2_fixed_collapses_when_t1_equals_t0() {
        let p = BoundParams {
            kappa1: 0.7,
            kappa2: 0.4,
            rho: 3.0,
            l_b: 0.5,
            l_sigma: 0.2,
            l_d: 0.0,
            alpha: 2.0,
            beta: 1.5,
            c1_sup_phi: 0.9,
            c2_sup_a: 1.1,
        };
        let (t, t0, psq) = (2.0, 0.3, 4.0);
        let q = BoundQuery::new(BoundKind::Thm2Fixed, p, t).with_extras(BoundExtras {
            t0: Some(t0),
            t1: Some(t0),
            p_t0_sq: Some(psq),
            ..Default::default()
        });
        let lhs = theorem_bound(&q).unwrap();
        let pre = 9.0 * p.kappa1 / ((2.0 * p.beta).sqrt() * p.rho) + 12.0 * p.kappa2 / (p.beta * p.rho.sqrt());
        let l = 1.5 * p.l_b * p.l_b + 24.0 * p.l_sigma * p.l_sigma / p.beta + 0.5;
        let rhs = (t.sqrt() * pre * (1.0 + psq.sqrt())
            + t0.sqrt() * (3.0 * p.c1_sup_phi * t0.sqrt() + 18.0 * p.c2_sup_a / p.beta.sqrt()))
            * (l * t).exp();
        assert!(rel(lhs, rhs) < 1e-14);

        let grid: Vec<f64> = (0..=20).map(|i| t0 + (t - t0) * i as f64 / 20.0).collect();
        let m = thm2_fixed_min_over_t1(&q, &grid).unwrap();
        assert!(m.value <= lhs);
        assert!(m.argmin.0 >= t0 && m.argmin.0 <= t);
    }

    #[test]
    fn thm2_density_scales_with_chi() {
        let base = BoundQuery::new(BoundKind::Thm2Density, unit(), 1.0);
        let v1 = theorem_bound(&base.with_extras(BoundExtras {
            chi2: Some(1.0),
            ..Default::default()
        }))
        .unwrap();
        let v4 = theorem_bound(&base.with_extras(BoundExtras {
            chi2: Some(4.0),
            ..Default::default()
        }))
        .unwrap();
        assert!(rel(v4, 2.0 * v1) < 1e-14);
        assert!(rel(v1, 9.0 / 2f64.sqrt() * 0.5f64.exp()) < 1e-14);
    }

    #[test]
    fn dissipative_grid_min() {
        let m = dissipative_min(&unit(), BoundKind::DissContractive, 1e3, &v_grid(40)).unwrap();
        // κ₂ = 0 leaves only κ₁²/(2v₁(1 − v₁/2)), minimized at v₁ = 1
        assert!(rel(m.value, 1.0) < 1e-12);
        assert_eq!(m.argmin.0, 1.0);
        let mut p = unit();
        p.l_d = 0.0;
        let m = dissipative_min(&p, BoundKind::DissExpansive, 1.0, &v_grid(8)).unwrap();
        assert!(m.value > 0.0);
    }

    #[test]
    fn gronwall_examples() {
        let table: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64 / 100.0, 5.0)).collect();
        let g = gronwall_bound(&table, 0.0, 0.0).unwrap();
        assert_eq!(g.integral, 5.0);
        let table: Vec<(f64, f64)> = (0..=1000).map(|i| (i as f64 / 1000.0, 1.0)).collect();
        let g = gronwall_bound(&table, 0.4, 0.6).unwrap();
        assert!(rel(g.nondecreasing, E * E) < 1e-12);
        // closed form for g ≡ 1: 1 + c(e^{(c+1)t} − 1)/(c+1)
        assert!(rel(g.integral, 1.0 + 0.5 * (E * E - 1.0)) < 1e-6);
        assert!(matches!(gronwall_bound(&table, -0.1, 0.0), Err(Error::Query(_))));
    }

    #[test]
    fn fit_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.02].iter().map(|&x| (x, 3.0 * x * x)).collect();
        let f = fit_scaling(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 0.5 * x)).collect();
        assert!((fit_scaling(&pts).unwrap().slope - 1.0).abs() < 1e-12);
        assert!(matches!(
            fit_scaling(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]),
            Err(Error::Fit(_))
        ));
        assert!(matches!(fit_scaling(&pts[..2]), Err(Error::Fit(_))));
    }

    fn params() -> impl Strategy<Value = BoundParams> {
        (0.0..3.0, 0.0..3.0, 0.1..10.0, 0.0..0.5, 0.0..0.5, 1.0..5.0).prop_map(
            |(kappa1, kappa2, rho, l_b, l_sigma, beta)| BoundParams {
                kappa1,
                kappa2,
                rho,
                l_b,
                l_sigma,
                l_d: 0.0,
                alpha: 1.0,
                beta,
                c1_sup_phi: 0.0,
                c2_sup_a: 0.0,
            },
        )
    }

    proptest! {
        #[test]
        fn monotone_in_t_kappa_rho(p in params(), t in 0.0..3.0f64, dt in 0.0..1.0f64, dk in 0.0..1.0f64, dr in 0.0..5.0f64) {
            for kind in [BoundKind::Prop1, BoundKind::Thm1] {
                let b = |p: BoundParams, t: f64| theorem_bound(&BoundQuery::new(kind, p, t)).unwrap();
                let base = b(p, t);
                let tol = 1e-12 * base.abs();
                prop_assert!(b(p, t + dt) >= base - tol);
                let k1 = BoundParams { kappa1: p.kappa1 + dk, ..p };
                let k2 = BoundParams { kappa2: p.kappa2 + dk, ..p };
                let r = BoundParams { rho: p.rho + dr, ..p };
                prop_assert!(b(k1, t) >= base - tol);
                prop_assert!(b(k2, t) >= base - tol);
                prop_assert!(b(r, t) <= base + tol);
            }
        }

        #[test]
        fn thm1_below_prop1_iff_late(p in params(), t in 0.01..30.0f64) {
            prop_assume!(p.kappa1 > 1e-3);
            let p = BoundParams { kappa2: 0.0, ..p };
            let thm1 = theorem_bound(&BoundQuery::new(BoundKind::Thm1, p, t)).unwrap();
            let prop1 = theorem_bound(&BoundQuery::new(BoundKind::Prop1, p, t)).unwrap();
            let crossover = 27.0 / (2.0 * p.rho);
            prop_assume!((t - crossover).abs() > 1e-9 * crossover);
            prop_assert_eq!(thm1 <= prop1, t >= crossover);
        }

        #[test]
        fn integral_form_below_nondecreasing(
            knots in proptest::collection::vec(0.0..1.0f64, 2..12),
            c1 in 0.0..2.0f64,
            c2 in 0.0..2.0f64,
            t in 0.1..3.0f64,
        ) {
            // monotone piecewise-linear g through cumulative knots, tabulated finely
            let cum: Vec<f64> = knots.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).collect();
            let segs = cum.len() - 1;
            let n = 2000;
            let table: Vec<(f64, f64)> = (0..=n).map(|i| {
                let u = i as f64 / n as f64 * segs as f64;
                let j = (u.floor() as usize).min(segs - 1);
                let g = cum[j] + (u - j as f64) * (cum[j + 1] - cum[j]);
                (t * i as f64 / n as f64, g)
            }).collect();
            let b = gronwall_bound(&table, c1, c2).unwrap();
            prop_assert!(b.integral <= b.nondecreasing * (1.0 + 1e-9));
        }
    }
}
