//! The full reversible diffusion
//!
//! `dx = (−a∇V + β⁻¹ ∇·a) ds + √(2β⁻¹) σ dw`, with `a = σσᵀ`, together with the
//! reaction coordinate `ξ : ℝⁿ → ℝᵐ` and its derivatives.
//!
//! Every derivative callback is optional. Missing derivatives are supplied by
//! central finite differences; analytic callbacks always take precedence.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
/// `(x, i) ↦ ∇²ξ_i(x)`.
pub type ComponentMatrixFn = Arc<dyn Fn(&Vector, usize) -> Matrix + Send + Sync>;

/// Relative tolerance for `a = σσᵀ` when both callbacks are supplied.
pub const MOBILITY_CONSISTENCY_TOL: f64 = 1e-12;

/// First-derivative step: `cbrt(ε_mach) · max(1, |x_i|)`.
pub fn default_step(xi: f64) -> f64 {
    f64::EPSILON.cbrt() * xi.abs().max(1.0)
}

/// Second-derivative step: `ε_mach^{1/4} · max(1, |x_i|)`.
pub fn second_derivative_step(xi: f64) -> f64 {
    f64::EPSILON.powf(0.25) * xi.abs().max(1.0)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("non-finite value on the {what} stencil")))
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Vector) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    let n = x.len();
    let mut grad = Vector::zeros(n);
    let mut probe = x.clone();
    for i in 0..n {
        let h = default_step(x[i]);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        check_finite(&[fp, fm], "gradient")?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector field: entry `(k, l)` is `∂f_k/∂x_l`.
pub fn fd_jacobian<F>(f: F, x: &Vector) -> Result<Matrix>
where
    F: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(n);
    for l in 0..n {
        let h = default_step(x[l]);
        probe[l] = x[l] + h;
        let fp = f(&probe);
        probe[l] = x[l] - h;
        let fm = f(&probe);
        probe[l] = x[l];
        check_finite(fp.as_slice(), "jacobian")?;
        check_finite(fm.as_slice(), "jacobian")?;
        columns.push((fp - fm) / (2.0 * h));
    }
    Ok(Matrix::from_columns(&columns))
}

/// Central-difference derivative of a matrix field along every coordinate:
/// element `l` of the result is `∂M/∂x_l`.
pub fn fd_matrix_derivatives<F>(f: F, x: &Vector) -> Result<Vec<Matrix>>
where
    F: Fn(&Vector) -> Matrix,
{
    let n = x.len();
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let h = default_step(x[l]);
        probe[l] = x[l] + h;
        let mp = f(&probe);
        probe[l] = x[l] - h;
        let mm = f(&probe);
        probe[l] = x[l];
        check_finite(mp.as_slice(), "matrix derivative")?;
        check_finite(mm.as_slice(), "matrix derivative")?;
        out.push((mp - mm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient and Hessian of `f` at `x`.
///
/// With `h = None` the gradient uses [`default_step`] and the Hessian uses
/// [`second_derivative_step`] per coordinate; an explicit `h` is used for both.
/// The Hessian is returned symmetrized as `(H + Hᵀ)/2`.
pub fn finite_difference_bundle<F>(f: F, x: &Vector, h: Option<f64>) -> Result<(Vector, Matrix)>
where
    F: Fn(&Vector) -> f64,
{
    if let Some(h) = h {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!(
                "finite-difference step must be positive, got {h}"
            )));
        }
    }
    let n = x.len();
    let f0 = f(x);
    check_finite(&[f0], "centre")?;
    let mut probe = x.clone();

    let mut grad = Vector::zeros(n);
    for i in 0..n {
        let hi = h.unwrap_or_else(|| default_step(x[i]));
        probe[i] = x[i] + hi;
        let fp = f(&probe);
        probe[i] = x[i] - hi;
        let fm = f(&probe);
        probe[i] = x[i];
        check_finite(&[fp, fm], "gradient")?;
        grad[i] = (fp - fm) / (2.0 * hi);
    }

    let steps: Vec<f64> = (0..n)
        .map(|i| h.unwrap_or_else(|| second_derivative_step(x[i])))
        .collect();
    let mut hess = Matrix::zeros(n, n);
    for i in 0..n {
        let hi = steps[i];
        probe[i] = x[i] + hi;
        let fp = f(&probe);
        probe[i] = x[i] - hi;
        let fm = f(&probe);
        probe[i] = x[i];
        check_finite(&[fp, fm], "hessian")?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * hi;
                probe[j] = x[j] + sj * hj;
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let fpp = corner(1.0, 1.0);
            let fpm = corner(1.0, -1.0);
            let fmp = corner(-1.0, 1.0);
            let fmm = corner(-1.0, -1.0);
            check_finite(&[fpp, fpm, fmp, fmm], "hessian")?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    Ok((grad, hess))
}

/// A scalar test function with optional analytic derivatives.
#[derive(Clone)]
pub struct ScalarField {
    value: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
}

impl ScalarField {
    pub fn new(value: impl Fn(&Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }

    pub fn value(&self, x: &Vector) -> f64 {
        (self.value)(x)
    }

    /// Gradient and Hessian at `x`, analytic where available.
    pub fn derivatives(&self, x: &Vector) -> Result<(Vector, Matrix)> {
        match (&self.gradient, &self.hessian) {
            (Some(g), Some(h)) => Ok((g(x), h(x))),
            (g, h) => {
                let (fg, fh) = finite_difference_bundle(|p| (self.value)(p), x, None)?;
                Ok((g.as_ref().map_or(fg, |g| g(x)), h.as_ref().map_or(fh, |h| h(x))))
            }
        }
    }
}

/// The full diffusion system. Immutable after [`SystemSpecBuilder::build`];
/// cheap to clone and safe to share between threads.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    n: usize,
    m: usize,
    noise_dim: usize,
    beta: f64,
    c1: f64,
    potential: ScalarFn,
    potential_grad: Option<VectorFn>,
    sigma: Option<MatrixFn>,
    mobility: Option<MatrixFn>,
    mobility_div: Option<VectorFn>,
    xi: VectorFn,
    xi_jac: Option<MatrixFn>,
    xi_hess: Option<ComponentMatrixFn>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("noise_dim", &self.noise_dim)
            .field("beta", &self.beta)
            .field("c1", &self.c1)
            .finish_non_exhaustive()
    }
}

impl SystemSpec {
    pub fn builder(n: usize, m: usize) -> SystemSpecBuilder {
        SystemSpecBuilder {
            name: "custom".into(),
            n,
            m,
            beta: 1.0,
            c1: None,
            potential: None,
            potential_grad: None,
            sigma: None,
            mobility: None,
            mobility_div: None,
            xi: None,
            xi_jac: None,
            xi_hess: None,
            probe: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    /// Dimension `n′` of the driving Brownian motion.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn potential(&self, x: &Vector) -> f64 {
        (self.potential)(x)
    }

    pub fn potential_grad(&self, x: &Vector) -> Result<Vector> {
        match &self.potential_grad {
            Some(g) => Ok(g(x)),
            None => fd_gradient(|p| (self.potential)(p), x),
        }
    }

    /// `a(x)`: the mobility callback if given, otherwise `σσᵀ`.
    pub fn mobility(&self, x: &Vector) -> Matrix {
        match (&self.mobility, &self.sigma) {
            (Some(a), _) => a(x),
            (None, Some(s)) => {
                let s = s(x);
                &s * s.transpose()
            }
            (None, None) => unreachable!("validated at build time"),
        }
    }

    /// `σ(x)`: the sigma callback if given, otherwise the Cholesky factor of `a`.
    pub fn sigma(&self, x: &Vector) -> Result<Matrix> {
        match &self.sigma {
            Some(s) => Ok(s(x)),
            None => {
                let a = self.mobility(x);
                a.cholesky()
                    .map(|c| c.l())
                    .ok_or_else(|| Error::Invariant("mobility is not positive definite".into()))
            }
        }
    }

    /// `(∇·a)_i = Σ_j ∂a_ij/∂x_j`.
    pub fn mobility_div(&self, x: &Vector) -> Result<Vector> {
        if let Some(d) = &self.mobility_div {
            return Ok(d(x));
        }
        let derivs = fd_matrix_derivatives(|p| self.mobility(p), x)?;
        let mut div = Vector::zeros(self.n);
        for (j, dj) in derivs.iter().enumerate() {
            div += dj.column(j);
        }
        Ok(div)
    }

    pub fn xi(&self, x: &Vector) -> Vector {
        (self.xi)(x)
    }

    /// `∇ξ(x)` as an `m × n` matrix.
    pub fn xi_jac(&self, x: &Vector) -> Result<Matrix> {
        match &self.xi_jac {
            Some(j) => Ok(j(x)),
            None => fd_jacobian(|p| (self.xi)(p), x),
        }
    }

    /// `∇²ξ_i(x)`.
    pub fn xi_hess(&self, x: &Vector, i: usize) -> Result<Matrix> {
        if let Some(h) = &self.xi_hess {
            return Ok(h(x, i));
        }
        if self.xi_jac.is_some() {
            let jac = fd_jacobian(
                |p| {
                    let j = self.xi_jac(p).expect("analytic jacobian");
                    j.row(i).transpose()
                },
                x,
            )?;
            return Ok((&jac + jac.transpose()) * 0.5);
        }
        let (_, h) = finite_difference_bundle(|p| (self.xi)(p)[i], x, None)?;
        Ok(h)
    }

    /// Drift of the full dynamics, `−a∇V + β⁻¹ ∇·a`.
    pub fn drift(&self, x: &Vector) -> Result<Vector> {
        let a = self.mobility(x);
        let grad_v = self.potential_grad(x)?;
        let div = self.mobility_div(x)?;
        Ok(-(a * grad_v) + div / self.beta)
    }

    /// `Lξ(x)` for all components, using the derivative callbacks of `ξ`.
    pub fn generator_xi(&self, x: &Vector) -> Result<Vector> {
        let a = self.mobility(x);
        let drift = -(&a * self.potential_grad(x)?) + self.mobility_div(x)? / self.beta;
        let jac = self.xi_jac(x)?;
        let mut out = &jac * &drift;
        for i in 0..self.m {
            let h = self.xi_hess(x, i)?;
            out[i] += a.component_mul(&h).sum() / self.beta;
        }
        Ok(out)
    }

    /// Checks the pointwise structural invariants at `x`: symmetric `a` with
    /// smallest eigenvalue at least `c1`, full-rank `∇ξ`, and `a ≈ σσᵀ` when
    /// both callbacks are present.
    pub fn check_invariants(&self, x: &Vector) -> Result<()> {
        let a = self.mobility(x);
        let asym = (&a - a.transpose()).norm();
        if asym > 1e-12 * a.norm().max(1.0) {
            return Err(Error::Invariant(format!(
                "mobility is not symmetric (‖a − aᵀ‖_F = {asym:e})"
            )));
        }
        let lambda_min = a.clone().symmetric_eigenvalues().min();
        if lambda_min < self.c1 * (1.0 - 1e-12) {
            return Err(Error::Invariant(format!(
                "smallest eigenvalue of a is {lambda_min:e} < c1 = {:e}",
                self.c1
            )));
        }
        let jac = self.xi_jac(x)?;
        let sv = jac.singular_values();
        let scale = sv.max().max(1.0);
        let rank = sv.iter().filter(|&&s| s > 1e-12 * scale).count();
        if rank != self.m {
            return Err(Error::Invariant(format!("rank(∇ξ) = {rank}, expected {}", self.m)));
        }
        if let (Some(_), Some(s)) = (&self.mobility, &self.sigma) {
            let s = s(x);
            let ss = &s * s.transpose();
            let rel = (&ss - &a).norm() / a.norm();
            if rel > MOBILITY_CONSISTENCY_TOL {
                return Err(Error::Invariant(format!("a differs from σσᵀ by relative {rel:e}")));
            }
        }
        Ok(())
    }
}

/// `Lf(x) = −a∇V·∇f + β⁻¹(∇·a)·∇f + β⁻¹ a:∇²f`.
pub fn apply_generator(spec: &SystemSpec, f: &ScalarField, x: &Vector) -> Result<f64> {
    if x.len() != spec.n {
        return Err(Error::Dimension {
            what: "state",
            got: x.len(),
            expected: spec.n,
        });
    }
    let (grad, hess) = f.derivatives(x)?;
    if grad.len() != spec.n {
        return Err(Error::Dimension {
            what: "gradient callback",
            got: grad.len(),
            expected: spec.n,
        });
    }
    if hess.shape() != (spec.n, spec.n) {
        return Err(Error::Dimension {
            what: "hessian callback",
            got: hess.nrows(),
            expected: spec.n,
        });
    }
    let a = spec.mobility(x);
    let drift = -(&a * spec.potential_grad(x)?) + spec.mobility_div(x)? / spec.beta;
    Ok(drift.dot(&grad) + a.component_mul(&hess).sum() / spec.beta)
}

pub struct SystemSpecBuilder {
    name: String,
    n: usize,
    m: usize,
    beta: f64,
    c1: Option<f64>,
    potential: Option<ScalarFn>,
    potential_grad: Option<VectorFn>,
    sigma: Option<(usize, MatrixFn)>,
    mobility: Option<MatrixFn>,
    mobility_div: Option<VectorFn>,
    xi: Option<VectorFn>,
    xi_jac: Option<MatrixFn>,
    xi_hess: Option<ComponentMatrixFn>,
    probe: Option<Vector>,
}

impl SystemSpecBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
    pub fn beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }
    /// Ellipticity floor of `a`. Defaults to the smallest eigenvalue of `a` at the probe point.
    pub fn c1(mut self, c1: f64) -> Self {
        self.c1 = Some(c1);
        self
    }
    pub fn potential(mut self, v: impl Fn(&Vector) -> f64 + Send + Sync + 'static) -> Self {
        self.potential = Some(Arc::new(v));
        self
    }
    pub fn potential_grad(mut self, g: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.potential_grad = Some(Arc::new(g));
        self
    }
    /// `σ : ℝⁿ → ℝ^{n×n′}`.
    pub fn sigma(mut self, noise_dim: usize, s: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.sigma = Some((noise_dim, Arc::new(s)));
        self
    }
    pub fn mobility(mut self, a: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.mobility = Some(Arc::new(a));
        self
    }
    pub fn mobility_div(mut self, d: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.mobility_div = Some(Arc::new(d));
        self
    }
    pub fn xi(mut self, xi: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.xi = Some(Arc::new(xi));
        self
    }
    pub fn xi_jac(mut self, j: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.xi_jac = Some(Arc::new(j));
        self
    }
    pub fn xi_hess(mut self, h: impl Fn(&Vector, usize) -> Matrix + Send + Sync + 'static) -> Self {
        self.xi_hess = Some(Arc::new(h));
        self
    }
    /// Point at which callback output shapes are validated (default: `(1, …, 1)`).
    pub fn probe_point(mut self, x: Vector) -> Self {
        self.probe = Some(x);
        self
    }

    pub fn build(self) -> Result<SystemSpec> {
        let (n, m) = (self.n, self.m);
        if !(1 <= m && m < n) {
            return Err(Error::Config(format!("need 1 ≤ m < n, got n = {n}, m = {m}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        let potential = self
            .potential
            .ok_or_else(|| Error::Config("potential callback is required".into()))?;
        let xi = self
            .xi
            .ok_or_else(|| Error::Config("reaction coordinate callback is required".into()))?;
        if self.sigma.is_none() && self.mobility.is_none() {
            return Err(Error::Config("either mobility or sigma must be supplied".into()));
        }
        let noise_dim = self.sigma.as_ref().map_or(n, |(d, _)| *d);
        if noise_dim < n {
            return Err(Error::Config(format!("noise dimension {noise_dim} < n = {n}")));
        }
        let mut spec = SystemSpec {
            name: self.name,
            n,
            m,
            noise_dim,
            beta: self.beta,
            c1: 0.0,
            potential,
            potential_grad: self.potential_grad,
            sigma: self.sigma.map(|(_, s)| s),
            mobility: self.mobility,
            mobility_div: self.mobility_div,
            xi,
            xi_jac: self.xi_jac,
            xi_hess: self.xi_hess,
        };

        let probe = self.probe.unwrap_or_else(|| Vector::from_element(n, 1.0));
        if probe.len() != n {
            return Err(Error::Dimension {
                what: "probe point",
                got: probe.len(),
                expected: n,
            });
        }
        let dim_err = |what, got, expected| Err(Error::Dimension { what, got, expected });
        if let Some(g) = &spec.potential_grad {
            let g = g(&probe);
            if g.len() != n {
                return dim_err("potential gradient", g.len(), n);
            }
        }
        if let Some(s) = &spec.sigma {
            let s = s(&probe);
            if s.nrows() != n || s.ncols() != noise_dim {
                return dim_err("sigma", s.nrows() * s.ncols(), n * noise_dim);
            }
        }
        if let Some(a) = &spec.mobility {
            let a = a(&probe);
            if a.shape() != (n, n) {
                return dim_err("mobility", a.nrows() * a.ncols(), n * n);
            }
        }
        if let Some(d) = &spec.mobility_div {
            let d = d(&probe);
            if d.len() != n {
                return dim_err("mobility divergence", d.len(), n);
            }
        }
        let xv = (spec.xi)(&probe);
        if xv.len() != m {
            return dim_err("reaction coordinate", xv.len(), m);
        }
        if let Some(j) = &spec.xi_jac {
            let j = j(&probe);
            if j.shape() != (m, n) {
                return dim_err("xi jacobian", j.nrows() * j.ncols(), m * n);
            }
        }
        if let Some(h) = &spec.xi_hess {
            let h = h(&probe, 0);
            if h.shape() != (n, n) {
                return dim_err("xi hessian", h.nrows() * h.ncols(), n * n);
            }
        }

        spec.c1 = match self.c1 {
            Some(c1) if c1 > 0.0 => c1,
            Some(c1) => return Err(Error::Config(format!("c1 must be positive, got {c1}"))),
            None => spec.mobility(&probe).symmetric_eigenvalues().min(),
        };
        spec.check_invariants(&probe)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn ou2d() -> SystemSpec {
        SystemSpec::builder(2, 1)
            .name("ou2d")
            .potential(|x| 0.5 * x.norm_squared())
            .potential_grad(|x| x.clone())
            .mobility(|_| Matrix::identity(2, 2))
            .mobility_div(|_| Vector::zeros(2))
            .xi(|x| Vector::from_element(1, x[0]))
            .build()
            .unwrap()
    }

    #[test]
    fn generator_of_constant_vanishes() {
        let spec = ou2d();
        let f = ScalarField::new(|_| 3.0);
        let x = Vector::from_vec(vec![0.4, -1.2]);
        assert!(apply_generator(&spec, &f, &x).unwrap().abs() < 1e-6);
    }

    #[test]
    fn generator_of_first_coordinate_is_minus_dv() {
        let spec = ou2d();
        let f = ScalarField::new(|x| x[0])
            .with_gradient(|_| Vector::from_vec(vec![1.0, 0.0]))
            .with_hessian(|_| Matrix::zeros(2, 2));
        let x = Vector::from_vec(vec![2.0, 0.0]);
        assert_eq!(apply_generator(&spec, &f, &x).unwrap(), -2.0);
    }

    #[test]
    fn generator_of_radius_matches_laplacian_identity() {
        // V(r) = (r² − 1)², so V′(r) = 4r(r² − 1); Δr = 1/r in two dimensions.
        let beta = 1.7;
        let spec = SystemSpec::builder(2, 1)
            .beta(beta)
            .potential(|x| (x.norm_squared() - 1.0).powi(2))
            .potential_grad(|x| x * (4.0 * (x.norm_squared() - 1.0)))
            .mobility(|_| Matrix::identity(2, 2))
            .xi(|x| Vector::from_element(1, x.norm()))
            .build()
            .unwrap();
        let f = ScalarField::new(|x| x.norm());
        for &(x1, x2) in &[(0.8, 0.3), (-1.1, 0.5), (0.2, -1.4)] {
            let x = Vector::from_vec(vec![x1, x2]);
            let r: f64 = x.norm();
            let expected = -4.0 * r * (r * r - 1.0) + 1.0 / (beta * r);
            let got = apply_generator(&spec, &f, &x).unwrap();
            assert!(
                close(got, expected, 1e-6 * expected.abs().max(1.0)),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn wrong_gradient_dimension_is_rejected() {
        let spec = ou2d();
        let f = ScalarField::new(|x| x[0])
            .with_gradient(|_| Vector::zeros(3))
            .with_hessian(|_| Matrix::zeros(2, 2));
        let err = apply_generator(&spec, &f, &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn fd_bundle_polynomial() {
        let x = Vector::from_element(1, 3.0);
        let (g, h) = finite_difference_bundle(|p| p[0] * p[0], &x, Some(1e-4)).unwrap();
        assert!(close(g[0], 6.0, 1e-6));
        assert!(close(h[(0, 0)], 2.0, 1e-4));
    }

    #[test]
    fn fd_bundle_linear_has_zero_hessian() {
        let x = Vector::from_vec(vec![0.3, -2.0, 5.0]);
        let (g, h) = finite_difference_bundle(|p| 2.0 * p[0] - p[1] + 0.5 * p[2], &x, None).unwrap();
        assert!(close(g[0], 2.0, 1e-8) && close(g[1], -1.0, 1e-8) && close(g[2], 0.5, 1e-8));
        assert!(h.amax() < 1e-6);
    }

    #[test]
    fn fd_bundle_trigonometric_matches_analytic() {
        let x = Vector::from_vec(vec![0.3, 0.7]);
        let (g, h) = finite_difference_bundle(|p| p[0].sin() * p[1].cos(), &x, None).unwrap();
        let (s1, c1, s2, c2) = (0.3f64.sin(), 0.3f64.cos(), 0.7f64.sin(), 0.7f64.cos());
        assert!(close(g[0], c1 * c2, 1e-6));
        assert!(close(g[1], -s1 * s2, 1e-6));
        assert!(close(h[(0, 0)], -s1 * c2, 1e-6));
        assert!(close(h[(1, 1)], -s1 * c2, 1e-6));
        assert!(close(h[(0, 1)], -c1 * s2, 1e-6));
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn fd_bundle_rejects_non_finite_stencil() {
        let x = Vector::from_element(1, 0.0);
        let err = finite_difference_bundle(|p| 1.0 / p[0], &x, Some(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
        let err = finite_difference_bundle(|p| p[0].ln(), &x, Some(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn missing_mobility_and_sigma_is_a_configuration_error() {
        let err = SystemSpec::builder(2, 1)
            .potential(|x| x.norm_squared())
            .xi(|x| Vector::from_element(1, x[0]))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sigma_only_system_uses_sigma_sigma_transpose() {
        let spec = SystemSpec::builder(2, 1)
            .potential(|x| x.norm_squared())
            .sigma(3, |_| Matrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]))
            .xi(|x| Vector::from_element(1, x[0]))
            .build()
            .unwrap();
        let a = spec.mobility(&Vector::zeros(2));
        assert_eq!(a, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]));
        assert_eq!(spec.noise_dim(), 3);
        assert!(spec.mobility_div(&Vector::zeros(2)).unwrap().amax() < 1e-9);
    }

    #[test]
    fn inconsistent_mobility_and_sigma_is_rejected() {
        let err = SystemSpec::builder(2, 1)
            .potential(|x| x.norm_squared())
            .sigma(2, |_| Matrix::identity(2, 2))
            .mobility(|_| Matrix::identity(2, 2) * 2.0)
            .xi(|x| Vector::from_element(1, x[0]))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn callback_dimension_mismatch_is_reported() {
        let err = SystemSpec::builder(2, 1)
            .potential(|x| x.norm_squared())
            .mobility(|_| Matrix::identity(3, 3))
            .xi(|x| Vector::from_element(1, x[0]))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rank_deficient_coordinate_is_rejected() {
        let err = SystemSpec::builder(3, 2)
            .potential(|x| x.norm_squared())
            .mobility(|_| Matrix::identity(3, 3))
            .xi(|x| Vector::from_vec(vec![x[0] + x[1], 2.0 * (x[0] + x[1])]))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn generator_xi_matches_fully_finite_difference_evaluation() {
        // Variable mobility, nonlinear ξ; analytic ξ derivatives against FD-only.
        let base = || {
            SystemSpec::builder(2, 1)
                .potential(|x| 0.25 * x[0].powi(4) + 0.5 * x[1] * x[1] + 0.3 * x[0] * x[1])
                .mobility(|x| {
                    let s = 1.0 + 0.3 * x[0].sin().powi(2);
                    Matrix::from_row_slice(2, 2, &[s, 0.1 * x[1], 0.1 * x[1], 2.0])
                })
                .xi(|x| Vector::from_element(1, x[0] + 0.2 * x[1] * x[1]))
        };
        let fd_only = base().build().unwrap();
        let analytic = base()
            .xi_jac(|x| Matrix::from_row_slice(1, 2, &[1.0, 0.4 * x[1]]))
            .xi_hess(|_, _| Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.4]))
            .build()
            .unwrap();
        for &(a, b) in &[(0.3, -0.4), (1.2, 0.9), (-0.7, 0.2)] {
            let x = Vector::from_vec(vec![a, b]);
            let l1 = analytic.generator_xi(&x).unwrap()[0];
            let l2 = fd_only.generator_xi(&x).unwrap()[0];
            assert!((l1 - l2).abs() <= 1e-5 * l1.abs().max(1.0), "{l1} vs {l2}");
        }
    }
}
