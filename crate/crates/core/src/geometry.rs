//! Level-set linear algebra.
//!
//! At a point `x` with `∇ξ` of full rank the module provides
//! `Φ = ∇ξ a ∇ξᵀ`, its SPD square root `A`, the skew projector
//! `Π = I − ∇ξᵀ Φ⁻¹ ∇ξ a` and the integrability obstruction `Πᵀ B_ij`
//! that decides whether a complementary coordinate `φ` with `∇ξ a ∇φᵀ = 0`
//! exists near `x`.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::model::{fd_jacobian, Matrix, SystemSpec, Vector};

/// Eigenvalue floor for SPD inputs.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Relative asymmetry above which an SPD input is rejected.
pub const ASYMMETRY_TOL: f64 = 1e-9;

/// `Φ_ij = ∇ξ_i · (a ∇ξ_j)`.
pub fn phi_matrix(spec: &SystemSpec, x: &Vector) -> Result<Matrix> {
    let jac = spec.xi_jac(x)?;
    let a = spec.mobility(x);
    phi_from_parts(&jac, &a)
}

fn phi_from_parts(jac: &Matrix, a: &Matrix) -> Result<Matrix> {
    let phi = jac * a * jac.transpose();
    let phi = (&phi + phi.transpose()) * 0.5;
    let lambda_min = smallest_eigenvalue(&phi);
    if !(lambda_min > EIGEN_FLOOR) {
        return Err(Error::DegenerateCoordinate(lambda_min));
    }
    Ok(phi)
}

fn smallest_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 1 {
        m[(0, 0)]
    } else {
        m.clone().symmetric_eigenvalues().min()
    }
}

fn check_spd_input(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension {
            what: "spd input",
            got: m.ncols(),
            expected: m.nrows(),
        });
    }
    let asym = (m - m.transpose()).norm();
    if asym > ASYMMETRY_TOL * m.norm() {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

/// Applies `f` to the eigenvalues of a symmetric positive definite matrix.
fn spd_spectral_map(m: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    check_spd_input(m)?;
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if !(v >= EIGEN_FLOOR) {
            return Err(Error::NearSingular(v));
        }
        return Ok(Matrix::from_element(1, 1, f(v)));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lambda_min = eig.eigenvalues.min();
    if !(lambda_min >= EIGEN_FLOOR) {
        return Err(Error::NearSingular(lambda_min));
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(f(l));
    }
    let out = scaled * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// The unique SPD `X` with `X·X = M`, via symmetric eigendecomposition.
pub fn spd_sqrt(m: &Matrix) -> Result<Matrix> {
    spd_spectral_map(m, f64::sqrt)
}

/// `M^{-1/2}` for SPD `M`.
pub fn spd_inv_sqrt(m: &Matrix) -> Result<Matrix> {
    spd_spectral_map(m, |l| 1.0 / l.sqrt())
}

/// Symmetrizes `M` and lifts eigenvalues below `floor` to `floor`.
pub fn floor_eigenvalues(m: &Matrix, floor: f64) -> Matrix {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 1 {
        return Matrix::from_element(1, 1, sym[(0, 0)].max(floor));
    }
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= floor {
        return eig.recompose();
    }
    let mut e = eig;
    e.eigenvalues.iter_mut().for_each(|l| *l = l.max(floor));
    e.recompose()
}

fn pi_from_parts(jac: &Matrix, a: &Matrix, phi: &Matrix) -> Result<Matrix> {
    let n = jac.ncols();
    let phi_inv = phi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateCoordinate(smallest_eigenvalue(phi)))?
        .inverse();
    Ok(Matrix::identity(n, n) - jac.transpose() * phi_inv * jac * a)
}

/// `Π = I − Σ_ij (Φ⁻¹)_ij ∇ξ_i ⊗ (a∇ξ_j)`.
pub fn projection_pi(spec: &SystemSpec, x: &Vector) -> Result<Matrix> {
    let jac = spec.xi_jac(x)?;
    let a = spec.mobility(x);
    let phi = phi_from_parts(&jac, &a)?;
    pi_from_parts(&jac, &a, &phi)
}

/// Orthogonal projector onto the tangent space `ker ∇ξ(x)` of the level set.
pub fn tangent_projector(spec: &SystemSpec, x: &Vector) -> Result<Matrix> {
    let jac = spec.xi_jac(x)?;
    let n = jac.ncols();
    let gram = &jac * jac.transpose();
    let inv = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateCoordinate(smallest_eigenvalue(&gram)))?
        .inverse();
    Ok(Matrix::identity(n, n) - jac.transpose() * inv * jac)
}

/// Level-set quantities at one point.
#[derive(Debug, Clone)]
pub struct LevelSetFrame {
    pub x: Vector,
    /// `∇ξ`, `m × n`.
    pub grad_xi: Matrix,
    /// `a(x)`.
    pub mobility: Matrix,
    /// `Φ`, `m × m`.
    pub phi: Matrix,
    /// `A = Φ^{1/2}`.
    pub sqrt_phi: Matrix,
    /// `Π`, `n × n`.
    pub pi: Matrix,
}

/// Relative residuals of the frame identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameResiduals {
    /// `‖A·A − Φ‖_F / ‖Φ‖_F`
    pub sqrt: f64,
    /// `‖Π² − Π‖_F / ‖Π‖_F`
    pub idempotence: f64,
    /// `max_i ‖Π∇ξ_iᵀ‖ / (‖Π‖_F |∇ξ_i|)`
    pub annihilation: f64,
    /// `‖Πᵀa − aΠ‖_F / (‖a‖_F ‖Π‖_F)`
    pub symmetry: f64,
}

impl FrameResiduals {
    pub fn max(&self) -> f64 {
        self.sqrt
            .max(self.idempotence)
            .max(self.annihilation)
            .max(self.symmetry)
    }
}

impl LevelSetFrame {
    pub fn new(spec: &SystemSpec, x: &Vector) -> Result<Self> {
        let grad_xi = spec.xi_jac(x)?;
        let mobility = spec.mobility(x);
        let phi = phi_from_parts(&grad_xi, &mobility)?;
        let sqrt_phi = spd_sqrt(&phi)?;
        let pi = pi_from_parts(&grad_xi, &mobility, &phi)?;
        Ok(Self {
            x: x.clone(),
            grad_xi,
            mobility,
            phi,
            sqrt_phi,
            pi,
        })
    }

    /// `Πᵀ a`, the mobility of the fiber dynamics.
    pub fn fiber_mobility(&self) -> Matrix {
        self.pi.transpose() * &self.mobility
    }

    pub fn residuals(&self) -> FrameResiduals {
        let pi_norm = self.pi.norm();
        let sqrt = (&self.sqrt_phi * &self.sqrt_phi - &self.phi).norm() / self.phi.norm();
        let idempotence = (&self.pi * &self.pi - &self.pi).norm() / pi_norm;
        let annihilation = (0..self.grad_xi.nrows())
            .map(|i| {
                let g = self.grad_xi.row(i).transpose();
                (&self.pi * &g).norm() / (pi_norm * g.norm())
            })
            .fold(0.0, f64::max);
        let symmetry = (self.pi.transpose() * &self.mobility - &self.mobility * &self.pi).norm()
            / (self.mobility.norm() * pi_norm);
        FrameResiduals {
            sqrt,
            idempotence,
            annihilation,
            symmetry,
        }
    }

    /// Fails with an invariant error if any identity is violated beyond `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let r = self.residuals();
        if r.max() > tol {
            return Err(Error::Invariant(format!(
                "level-set frame residuals {r:?} exceed {tol:e}"
            )));
        }
        Ok(())
    }
}

/// Integrability obstruction at a point.
#[derive(Debug, Clone)]
pub struct FrobeniusReport {
    /// `B[i][j]`, the commutator of the fields `a∇ξ_i` and `a∇ξ_j`.
    pub b: Vec<Vec<Vector>>,
    /// `max_ij |Πᵀ B_ij|`.
    pub residual: f64,
}

/// `B_{ij,l′} = (a∇ξ_i)_l ∂_l(a∇ξ_j)_{l′} − (a∇ξ_j)_l ∂_l(a∇ξ_i)_{l′}` and the
/// largest `|Πᵀ B_ij|`. Derivatives of `a∇ξ_j` are taken by central differences.
pub fn frobenius_obstruction(spec: &SystemSpec, x: &Vector) -> Result<FrobeniusReport> {
    let m = spec.m();
    let frame = LevelSetFrame::new(spec, x)?;
    let field = |p: &Vector, j: usize| -> Vector {
        let jac = spec
            .xi_jac(p)
            .unwrap_or_else(|_| Matrix::from_element(m, p.len(), f64::NAN));
        spec.mobility(p) * jac.row(j).transpose()
    };
    let values: Vec<Vector> = (0..m).map(|j| field(x, j)).collect();
    let derivs = (0..m)
        .map(|j| fd_jacobian(|p| field(p, j), x))
        .collect::<Result<Vec<_>>>()?;

    let pit = frame.pi.transpose();
    let mut residual: f64 = 0.0;
    let mut b = vec![vec![Vector::zeros(spec.n()); m]; m];
    for i in 0..m {
        for j in 0..m {
            let bij = &derivs[j] * &values[i] - &derivs[i] * &values[j];
            if bij.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation("non-finite commutator field".into()));
            }
            residual = residual.max((&pit * &bij).norm());
            b[i][j] = bij;
        }
    }
    Ok(FrobeniusReport { b, residual })
}
