//! The effective model: conditional expectations of `Lξ` and `Φ` on a
//! z-grid, plus estimators for the constants that enter the error bounds.
//!
//! Three ways to build an [`EffectiveModel`]:
//! - [`estimate_binned`]: hard binning of equilibrium samples into the dual
//!   cells of the grid nodes;
//! - [`estimate_fiber`]: time averages of the projected fiber dynamics at
//!   each node;
//! - [`quadrature_oracle`]: deterministic quadrature over a [`FiberChart`],
//!   used as ground truth.
//!
//! `σ̃` is never interpolated directly. The conditional mean of `Φ` is
//! interpolated entrywise and `σ̃ = (mean Φ)^{1/2}` is formed at query time,
//! so `σ̃² = E[Φ | ξ = z]` holds between nodes as well as on them.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{floor_eigenvalues, phi_matrix, spd_sqrt, LevelSetFrame, EIGEN_FLOOR};
use crate::model::{fd_jacobian, fd_matrix_derivatives, Matrix, SystemSpec, Vector};
use crate::quadrature::{integrate, integrate_2d, QuadOptions};
use crate::sampler::{
    csv_err, project_to_fiber, simulate_fiber, simulate_full, FiberConfig, IntegratorConfig, X0Source,
};
use crate::stats::{RunningStats, VectorStats};
use crate::systems::FiberChart;

/// Fraction of interior nodes allowed to stay empty.
pub const MAX_MISSING_FRACTION: f64 = 0.05;
/// Fraction of rejected samples tolerated by [`estimate_kappas`].
pub const MAX_REJECTED_FRACTION: f64 = 0.01;
/// Number of independent work chunks; fixed so reductions do not depend on
/// the size of the worker pool.
const CHUNKS: usize = 64;

/// Rectangular grid with strictly increasing nodes on every axis.
/// Flat indices run with the first axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZGrid {
    axes: Vec<Vec<f64>>,
}

impl ZGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        for (k, ax) in axes.iter().enumerate() {
            if ax.len() < 2 {
                return Err(Error::Config(format!("grid axis {k} needs at least two nodes")));
            }
            if ax.windows(2).any(|w| !(w[1] > w[0])) || ax.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("grid axis {k} is not strictly increasing")));
            }
        }
        Ok(Self { axes })
    }

    /// `nodes` equally spaced points on `[lo, hi]` per axis.
    pub fn uniform(spec: &[(f64, f64, usize)]) -> Result<Self> {
        let axes = spec
            .iter()
            .map(|&(lo, hi, n)| {
                if n < 2 {
                    return vec![lo];
                }
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            })
            .collect();
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.axes
            .iter()
            .map(|ax| {
                let i = flat % ax.len();
                flat /= ax.len();
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (k, ax) in self.axes.iter().enumerate().rev() {
            flat = flat * ax.len() + idx[k];
        }
        flat
    }

    pub fn node(&self, flat: usize) -> Vector {
        let idx = self.multi_index(flat);
        Vector::from_iterator(self.dim(), idx.iter().zip(&self.axes).map(|(&i, ax)| ax[i]))
    }

    pub fn is_interior(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .all(|(&i, ax)| i > 0 && i + 1 < ax.len())
    }

    /// Lower and upper edge of the dual cell of node `i` on axis `k`.
    fn dual_edges(&self, k: usize, i: usize) -> (f64, f64) {
        let ax = &self.axes[k];
        let lo = if i == 0 { ax[0] } else { 0.5 * (ax[i - 1] + ax[i]) };
        let hi = if i + 1 == ax.len() {
            ax[i]
        } else {
            0.5 * (ax[i] + ax[i + 1])
        };
        (lo, hi)
    }

    /// Volume of the dual cell around a node (half cells at the boundary).
    pub fn cell_volume(&self, flat: usize) -> f64 {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let (lo, hi) = self.dual_edges(k, i);
                hi - lo
            })
            .product()
    }

    /// Node whose dual cell contains `z`; `None` outside the grid box.
    pub fn bin(&self, z: &Vector) -> Option<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        for (k, ax) in self.axes.iter().enumerate() {
            let v = z[k];
            if !(v >= ax[0] && v <= ax[ax.len() - 1]) {
                return None;
            }
            let j = ax.partition_point(|&a| a <= v);
            let i = if j == 0 {
                0
            } else if j == ax.len() || v - ax[j - 1] < ax[j] - v {
                j - 1
            } else {
                j
            };
            idx.push(i);
        }
        Some(self.flat_index(&idx))
    }

    /// Multilinear interpolation weights at `z` (clamped to the grid box)
    /// and whether clamping happened.
    pub fn interpolation_weights(&self, z: &Vector) -> (Vec<(usize, f64)>, bool) {
        let mut clamped = false;
        let mut lower = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for (k, ax) in self.axes.iter().enumerate() {
            let v = z[k];
            let (first, last) = (ax[0], ax[ax.len() - 1]);
            let v = if v < first || v > last || !v.is_finite() {
                clamped = true;
                if v > last {
                    last
                } else {
                    first
                }
            } else {
                v
            };
            let j = ax.partition_point(|&a| a <= v).clamp(1, ax.len() - 1);
            lower.push(j - 1);
            frac.push(((v - ax[j - 1]) / (ax[j] - ax[j - 1])).clamp(0.0, 1.0));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(1 << d);
        let mut idx = vec![0; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                idx[k] = lower[k] + up as usize;
                w *= if up { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                out.push((self.flat_index(&idx), w));
            }
        }
        (out, clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMethod {
    Binned,
    Fiber,
    Quadrature,
}

impl EstimationMethod {
    fn as_str(&self) -> &'static str {
        match self {
            EstimationMethod::Binned => "binned",
            EstimationMethod::Fiber => "fiber",
            EstimationMethod::Quadrature => "quadrature",
        }
    }
}

/// Gridded effective coefficients. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveModel {
    pub grid: ZGrid,
    pub method: EstimationMethod,
    pub beta: f64,
    /// `b̃` at each node.
    pub b_tilde: Vec<Vector>,
    /// `E[Φ | ξ = z]` at each node.
    pub phi_mean: Vec<Matrix>,
    /// `σ̃ = (E[Φ | ξ = z])^{1/2}` at each node.
    pub sigma_tilde: Vec<Matrix>,
    /// `E[A | ξ = z]` at each node.
    pub a_mean: Vec<Matrix>,
    /// Marginal density of `ξ`; absent for fiber estimates without a
    /// separate binned pass.
    pub q: Option<Vec<f64>>,
    /// Samples per node (zero for quadrature).
    pub counts: Vec<u64>,
    /// Standard errors of `b̃` (zero for quadrature).
    pub b_stderr: Vec<Vector>,
    /// Nodes without samples; their coefficients are copied from the nearest
    /// populated node.
    pub missing: Vec<bool>,
}

/// Per-node raw conditional means before finalization.
struct NodeMeans {
    b: Vector,
    b_se: Vector,
    phi: Matrix,
    a: Matrix,
    count: u64,
}

impl EffectiveModel {
    pub fn m(&self) -> usize {
        self.grid.dim()
    }

    fn assemble(
        grid: ZGrid,
        method: EstimationMethod,
        beta: f64,
        nodes: Vec<Option<NodeMeans>>,
        q: Option<Vec<f64>>,
    ) -> Result<Self> {
        let len = grid.len();
        let interior: Vec<usize> = (0..len).filter(|&i| grid.is_interior(i)).collect();
        let missing: Vec<bool> = nodes.iter().map(Option::is_none).collect();
        let missing_interior = interior.iter().filter(|&&i| missing[i]).count();
        let pool = if interior.is_empty() { len } else { interior.len() };
        let missing_pool = if interior.is_empty() {
            missing.iter().filter(|&&b| b).count()
        } else {
            missing_interior
        };
        if missing_pool as f64 > MAX_MISSING_FRACTION * pool as f64 {
            return Err(Error::Estimation(format!(
                "{missing_pool} of {pool} interior grid nodes have no samples"
            )));
        }
        let filled: Vec<usize> = (0..len).filter(|&i| !missing[i]).collect();
        if filled.is_empty() {
            return Err(Error::Estimation("no grid node received samples".into()));
        }
        let m = grid.dim();
        let mut b_tilde = Vec::with_capacity(len);
        let mut b_stderr = Vec::with_capacity(len);
        let mut phi_mean = Vec::with_capacity(len);
        let mut a_mean = Vec::with_capacity(len);
        let mut counts = Vec::with_capacity(len);
        for i in 0..len {
            let src = match &nodes[i] {
                Some(n) => n,
                None => {
                    let zi = grid.node(i);
                    let j = *filled
                        .iter()
                        .min_by(|&&a, &&b| {
                            let da = (grid.node(a) - &zi).norm();
                            let db = (grid.node(b) - &zi).norm();
                            da.total_cmp(&db)
                        })
                        .expect("non-empty");
                    nodes[j].as_ref().expect("filled node")
                }
            };
            b_tilde.push(src.b.clone());
            b_stderr.push(if nodes[i].is_some() {
                src.b_se.clone()
            } else {
                Vector::from_element(m, f64::INFINITY)
            });
            phi_mean.push((&src.phi + src.phi.transpose()) * 0.5);
            a_mean.push(src.a.clone());
            counts.push(nodes[i].as_ref().map_or(0, |n| n.count));
        }
        let mut sigma_tilde = Vec::with_capacity(len);
        for phi in &phi_mean {
            let s = spd_sqrt(&floor_eigenvalues(phi, EIGEN_FLOOR))?;
            let err = (&s * &s - phi).norm();
            if err > 1e-10 * phi.norm() {
                return Err(Error::Invariant(format!(
                    "σ̃² differs from the conditional mean of Φ by {err:e}"
                )));
            }
            sigma_tilde.push(s);
        }
        Ok(Self {
            grid,
            method,
            beta,
            b_tilde,
            phi_mean,
            sigma_tilde,
            a_mean,
            q,
            counts,
            b_stderr,
            missing,
        })
    }

    /// A model tabulated from closed-form coefficients (`b̃`, `E[Φ|z]`);
    /// `E[A|z]` is set to `σ̃`.
    pub fn from_fn(
        grid: ZGrid,
        beta: f64,
        b: impl Fn(&Vector) -> Vector,
        phi: impl Fn(&Vector) -> Matrix,
    ) -> Result<Self> {
        let m = grid.dim();
        let nodes = (0..grid.len())
            .map(|i| {
                let z = grid.node(i);
                let phi = phi(&z);
                let a = spd_sqrt(&phi)?;
                Ok(Some(NodeMeans {
                    b: b(&z),
                    b_se: Vector::zeros(m),
                    phi,
                    a,
                    count: 0,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(grid, EstimationMethod::Quadrature, beta, nodes, None)
    }

    fn interpolate<T, F>(&self, z: &Vector, field: F) -> (T, bool)
    where
        F: Fn(usize) -> T,
        T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let (weights, clamped) = self.grid.interpolation_weights(z);
        let mut it = weights.into_iter();
        let (i0, w0) = it.next().expect("at least one corner");
        let acc = it.fold(field(i0) * w0, |acc, (i, w)| acc + field(i) * w);
        (acc, clamped)
    }

    /// `b̃(z)`; the flag reports clamping to the grid box.
    pub fn b_at(&self, z: &Vector) -> (Vector, bool) {
        self.interpolate(z, |i| self.b_tilde[i].clone())
    }

    /// Interpolated `E[Φ | ξ = z]`, symmetrized and eigenvalue-floored.
    pub fn phi_at(&self, z: &Vector) -> (Matrix, bool) {
        let (p, c) = self.interpolate(z, |i| self.phi_mean[i].clone());
        let p = (&p + p.transpose()) * 0.5;
        (floor_eigenvalues(&p, EIGEN_FLOOR), c)
    }

    /// `σ̃(z) = (E[Φ | ξ = z])^{1/2}`.
    pub fn sigma_at(&self, z: &Vector) -> Result<(Matrix, bool)> {
        let (p, c) = self.phi_at(z);
        Ok((spd_sqrt(&p)?, c))
    }

    pub fn a_mean_at(&self, z: &Vector) -> (Matrix, bool) {
        self.interpolate(z, |i| self.a_mean[i].clone())
    }

    pub fn q_at(&self, z: &Vector) -> Option<f64> {
        let q = self.q.as_ref()?;
        Some(self.interpolate(z, |i| q[i]).0)
    }

    /// `Σ Q · (dual cell volume)`; ≈ 1 when the grid covers the support.
    pub fn q_mass(&self) -> Option<f64> {
        let q = self.q.as_ref()?;
        Some((0..self.grid.len()).map(|i| q[i] * self.grid.cell_volume(i)).sum())
    }

    /// Writes the versioned text format (header `effdyn-model v1`).
    pub fn to_text(&self) -> String {
        let m = self.m();
        let mut s = String::from("effdyn-model v1\n");
        let _ = writeln!(s, "method {}", self.method.as_str());
        let _ = writeln!(s, "beta {}", self.beta);
        let _ = writeln!(s, "m {m}");
        for (k, ax) in self.grid.axes().iter().enumerate() {
            let vals: Vec<String> = ax.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "axis {k} {}", vals.join(" "));
        }
        let _ = writeln!(s, "has_q {}", self.q.is_some());
        let _ = writeln!(s, "nodes {}", self.grid.len());
        let _ = writeln!(
            s,
            "# index count missing q b[m] b_se[m] sigma_upper[m(m+1)/2] a_mean_upper[m(m+1)/2]"
        );
        for i in 0..self.grid.len() {
            let mut row = vec![
                i.to_string(),
                self.counts[i].to_string(),
                (self.missing[i] as u8).to_string(),
                self.q.as_ref().map_or(0.0, |q| q[i]).to_string(),
            ];
            row.extend(self.b_tilde[i].iter().map(|v| v.to_string()));
            row.extend(self.b_stderr[i].iter().map(|v| v.to_string()));
            row.extend(upper(&self.sigma_tilde[i]).into_iter().map(|v| v.to_string()));
            row.extend(upper(&self.a_mean[i]).into_iter().map(|v| v.to_string()));
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        if lines.next().map(str::trim) != Some("effdyn-model v1") {
            return Err(bad("missing header `effdyn-model v1`".into()));
        }
        let mut kv = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))?;
            Ok(rest.trim().to_string())
        };
        let method = match kv("method")?.as_str() {
            "binned" => EstimationMethod::Binned,
            "fiber" => EstimationMethod::Fiber,
            "quadrature" => EstimationMethod::Quadrature,
            other => return Err(bad(format!("unknown method `{other}`"))),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("bad number `{s}`: {e}")));
        let beta = num(&kv("beta")?)?;
        let m: usize = kv("m")?.parse().map_err(|e| bad(format!("bad m: {e}")))?;
        let mut axes = Vec::with_capacity(m);
        for k in 0..m {
            let rest = kv("axis")?;
            let mut parts = rest.split_whitespace();
            if parts.next() != Some(k.to_string().as_str()) {
                return Err(bad(format!("axis {k} out of order")));
            }
            axes.push(parts.map(num).collect::<Result<Vec<f64>>>()?);
        }
        let has_q = kv("has_q")? == "true";
        let len: usize = kv("nodes")?.parse().map_err(|e| bad(format!("bad node count: {e}")))?;
        let grid = ZGrid::new(axes)?;
        if grid.len() != len {
            return Err(bad(format!("node count {len} does not match grid size {}", grid.len())));
        }
        let tri = m * (m + 1) / 2;
        let width = 4 + 2 * m + 2 * tri;
        let mut model = Self {
            grid,
            method,
            beta,
            b_tilde: Vec::with_capacity(len),
            phi_mean: Vec::with_capacity(len),
            sigma_tilde: Vec::with_capacity(len),
            a_mean: Vec::with_capacity(len),
            q: has_q.then(Vec::new),
            counts: Vec::with_capacity(len),
            b_stderr: Vec::with_capacity(len),
            missing: Vec::with_capacity(len),
        };
        for i in 0..len {
            let line = lines.next().ok_or_else(|| bad(format!("missing node row {i}")))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != width || f[0] != i.to_string() {
                return Err(bad(format!("malformed node row {i}")));
            }
            model
                .counts
                .push(f[1].parse().map_err(|e| bad(format!("bad count: {e}")))?);
            model.missing.push(f[2] == "1");
            if let Some(q) = model.q.as_mut() {
                q.push(num(f[3])?);
            }
            let vals = f[4..].iter().map(|s| num(s)).collect::<Result<Vec<f64>>>()?;
            model.b_tilde.push(Vector::from_column_slice(&vals[..m]));
            model.b_stderr.push(Vector::from_column_slice(&vals[m..2 * m]));
            let sigma = from_upper(m, &vals[2 * m..2 * m + tri]);
            model.phi_mean.push(&sigma * &sigma);
            model.sigma_tilde.push(sigma);
            model.a_mean.push(from_upper(m, &vals[2 * m + tri..]));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// CSV export: `z1..zm,b1..bm,sigma_ij (i ≤ j),q,count,missing`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let m = self.m();
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (1..=m).map(|i| format!("z{i}")).collect();
        header.extend((1..=m).map(|i| format!("b{i}")));
        for i in 0..m {
            for j in i..m {
                header.push(format!("sigma_{}{}", i + 1, j + 1));
            }
        }
        header.extend(["q".into(), "count".into(), "missing".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.grid.len() {
            let mut row: Vec<String> = self.grid.node(i).iter().map(|v| v.to_string()).collect();
            row.extend(self.b_tilde[i].iter().map(|v| v.to_string()));
            row.extend(upper(&self.sigma_tilde[i]).into_iter().map(|v| v.to_string()));
            row.push(self.q.as_ref().map_or(String::new(), |q| q[i].to_string()));
            row.push(self.counts[i].to_string());
            row.push((self.missing[i] as u8).to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn upper(m: &Matrix) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_upper(k: usize, vals: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(k, k);
    let mut it = vals.iter();
    for i in 0..k {
        for j in i..k {
            let v = *it.next().expect("length checked by caller");
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `(Lξ, Φ, A)` at one state.
fn local_coefficients(spec: &SystemSpec, x: &Vector) -> Result<(Vector, Matrix, Matrix)> {
    let lxi = spec.generator_xi(x)?;
    let phi = phi_matrix(spec, x)?;
    let a = spd_sqrt(&phi)?;
    Ok((lxi, phi, a))
}

#[derive(Debug, Clone)]
struct NodeAccumulator {
    lxi: VectorStats,
    phi: VectorStats,
    a: VectorStats,
}

impl NodeAccumulator {
    fn new(m: usize) -> Self {
        Self {
            lxi: VectorStats::new(m),
            phi: VectorStats::new(m * m),
            a: VectorStats::new(m * m),
        }
    }

    fn push(&mut self, lxi: &Vector, phi: &Matrix, a: &Matrix) {
        self.lxi.push(lxi.as_slice());
        self.phi.push(phi.as_slice());
        self.a.push(a.as_slice());
    }

    fn merge(&mut self, other: &Self) {
        self.lxi.merge(&other.lxi);
        self.phi.merge(&other.phi);
        self.a.merge(&other.a);
    }

    fn finish(&self, m: usize) -> Option<NodeMeans> {
        (self.lxi.count() > 0).then(|| NodeMeans {
            b: self.lxi.mean(),
            b_se: self.lxi.stderr(),
            phi: self.phi.mean_matrix(m, m),
            a: self.a.mean_matrix(m, m),
            count: self.lxi.count(),
        })
    }
}

/// Mergeable per-bin statistics for the binned estimator.
#[derive(Debug, Clone)]
pub struct BinnedAccumulator {
    grid: ZGrid,
    nodes: Vec<NodeAccumulator>,
    total: u64,
    outside: u64,
}

impl BinnedAccumulator {
    pub fn new(grid: &ZGrid) -> Self {
        Self {
            nodes: vec![NodeAccumulator::new(grid.dim()); grid.len()],
            grid: grid.clone(),
            total: 0,
            outside: 0,
        }
    }

    pub fn push(&mut self, spec: &SystemSpec, x: &Vector) -> Result<()> {
        self.total += 1;
        match self.grid.bin(&spec.xi(x)) {
            Some(i) => {
                let (lxi, phi, a) = local_coefficients(spec, x)?;
                self.nodes[i].push(&lxi, &phi, &a);
            }
            None => self.outside += 1,
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            a.merge(b);
        }
        self.total += other.total;
        self.outside += other.outside;
    }

    /// Samples that fell outside the grid box.
    pub fn outside(&self) -> u64 {
        self.outside
    }

    pub fn finalize(self, beta: f64) -> Result<EffectiveModel> {
        if self.total == 0 {
            return Err(Error::Estimation("no samples".into()));
        }
        let m = self.grid.dim();
        let q: Vec<f64> = (0..self.grid.len())
            .map(|i| self.nodes[i].lxi.count() as f64 / (self.total as f64 * self.grid.cell_volume(i)))
            .collect();
        let nodes = self.nodes.iter().map(|n| n.finish(m)).collect();
        EffectiveModel::assemble(self.grid, EstimationMethod::Binned, beta, nodes, Some(q))
    }
}

/// Splits `0..n` into at most [`CHUNKS`] contiguous ranges.
fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    let k = n.clamp(1, CHUNKS);
    (0..k).map(|c| (c * n / k)..((c + 1) * n / k)).collect()
}

/// Binned conditional means from equilibrium trajectories: every recorded
/// state of every replica is assigned to the node whose dual cell contains
/// `ξ(x)`.
pub fn estimate_binned(
    spec: &SystemSpec,
    grid: &ZGrid,
    cfg: &IntegratorConfig,
    x0: &X0Source,
) -> Result<EffectiveModel> {
    check_grid(spec, grid)?;
    cfg.validate()?;
    let partials = chunks(cfg.n_replicas)
        .into_par_iter()
        .map(|range| {
            let mut acc = BinnedAccumulator::new(grid);
            for r in range {
                for p in simulate_full(spec, cfg, x0, r)? {
                    acc.push(spec, &p?.x)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = partials.into_iter();
    let mut acc = it.next().expect("at least one chunk");
    it.for_each(|p| acc.merge(&p));
    acc.finalize(spec.beta())
}

/// Binned estimate from a list of states (e.g. exact equilibrium draws).
pub fn estimate_binned_from_samples(spec: &SystemSpec, grid: &ZGrid, samples: &[Vector]) -> Result<EffectiveModel> {
    check_grid(spec, grid)?;
    let mut acc = BinnedAccumulator::new(grid);
    for x in samples {
        acc.push(spec, x)?;
    }
    acc.finalize(spec.beta())
}

fn check_grid(spec: &SystemSpec, grid: &ZGrid) -> Result<()> {
    if grid.dim() != spec.m() {
        return Err(Error::Dimension {
            what: "z-grid",
            got: grid.dim(),
            expected: spec.m(),
        });
    }
    Ok(())
}

/// Fiber-dynamics estimate: at each node, `fc.base.n_replicas` projected
/// fiber runs started from `start(z)` (pulled onto `Σ_z` first). Replica
/// streams are distinct across nodes. `q` is taken as given, typically from
/// a separate binned pass.
pub fn estimate_fiber(
    spec: &SystemSpec,
    grid: &ZGrid,
    fc: &FiberConfig,
    start: &(dyn Fn(&Vector) -> Vector + Sync),
    q: Option<Vec<f64>>,
) -> Result<EffectiveModel> {
    check_grid(spec, grid)?;
    fc.validate()?;
    if let Some(q) = &q {
        if q.len() != grid.len() {
            return Err(Error::Dimension {
                what: "marginal density",
                got: q.len(),
                expected: grid.len(),
            });
        }
    }
    let m = grid.dim();
    let reps = fc.base.n_replicas;
    let nodes = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let z = grid.node(i);
            let node_fc = FiberConfig {
                z: z.clone(),
                ..fc.clone()
            };
            let x0 = project_to_fiber(spec, &start(&z), &z, fc.newton_tol, fc.newton_max_iter.max(50))?.x;
            let mut acc = NodeAccumulator::new(m);
            for r in 0..reps {
                for p in simulate_fiber(spec, &node_fc, &x0, i * reps + r)? {
                    let (lxi, phi, a) = local_coefficients(spec, &p?.x)?;
                    acc.push(&lxi, &phi, &a);
                }
            }
            Ok(acc.finish(m))
        })
        .collect::<Result<Vec<_>>>()?;
    EffectiveModel::assemble(grid.clone(), EstimationMethod::Fiber, spec.beta(), nodes, q)
}

/// Log of the unnormalized `μ_z` density in chart coordinates,
/// `−βV − ½ log det(∇ξ∇ξᵀ) + ½ log det(TᵀT)`.
fn chart_log_weight(spec: &SystemSpec, chart: &FiberChart, z: &Vector, s: &[f64]) -> Result<(Vector, f64)> {
    let x = chart.embed(z, s);
    let jac = spec.xi_jac(&x)?;
    let gram = &jac * jac.transpose();
    let t = chart.tangents(z, s);
    let metric = t.transpose() * &t;
    let lw = -spec.beta() * spec.potential(&x) - 0.5 * gram.determinant().ln() + 0.5 * metric.determinant().ln();
    Ok((x, lw))
}

/// Ground-truth coefficients by adaptive quadrature over a fiber chart.
///
/// `support` is a box in z-space used to normalize `Q`; it must contain
/// essentially all of the marginal mass.
pub fn quadrature_oracle(
    spec: &SystemSpec,
    chart: &FiberChart,
    grid: &ZGrid,
    support: &[(f64, f64)],
    opts: &QuadOptions,
) -> Result<EffectiveModel> {
    check_grid(spec, grid)?;
    let m = spec.m();
    if chart.dim() != spec.n() - m || chart.dim() > 2 {
        return Err(Error::UnsupportedGeometry(format!(
            "quadrature needs a chart of dimension n − m ≤ 2, got {}",
            chart.dim()
        )));
    }
    if support.len() != m {
        return Err(Error::Dimension {
            what: "support box",
            got: support.len(),
            expected: m,
        });
    }
    // Common shift of the potential so exp(−βV) stays in range.
    let v_ref = (0..grid.len())
        .map(|i| spec.potential(&chart.centre(&grid.node(i))))
        .fold(f64::INFINITY, f64::min);
    let shift = spec.beta() * v_ref;
    let width = 1 + m + 2 * m * m;

    let fiber_integral = |z: &Vector, with_moments: bool| -> Result<Vector> {
        let integrand = |s: &[f64]| -> Result<Vector> {
            let (x, lw) = chart_log_weight(spec, chart, z, s)?;
            let w = (lw + shift).exp();
            let mut out = Vector::zeros(if with_moments { width } else { 1 });
            if !(w > 0.0) {
                return Ok(out);
            }
            out[0] = w;
            if with_moments {
                let (lxi, phi, a) = local_coefficients(spec, &x)?;
                out.rows_mut(1, m).copy_from(&(lxi * w));
                out.rows_mut(1 + m, m * m)
                    .copy_from(&Vector::from_column_slice((phi * w).as_slice()));
                out.rows_mut(1 + m + m * m, m * m)
                    .copy_from(&Vector::from_column_slice((a * w).as_slice()));
            }
            Ok(out)
        };
        let axes = chart.axes(z);
        match axes.as_slice() {
            [ax] => integrate(|s| integrand(&[s]), ax.lo, ax.hi, opts).map(|r| r.value),
            [a0, a1] => {
                integrate_2d(|s0, s1| integrand(&[s0, s1]), (a0.lo, a0.hi), (a1.lo, a1.hi), opts).map(|r| r.value)
            }
            _ => unreachable!("chart dimension checked above"),
        }
    };

    let normalization = {
        let f = |zs: &[f64]| fiber_integral(&Vector::from_column_slice(zs), false);
        match support {
            [(lo, hi)] => integrate(|z| f(&[z]), *lo, *hi, opts)?.value[0],
            [(l0, h0), (l1, h1)] => integrate_2d(|a, b| f(&[a, b]), (*l0, *h0), (*l1, *h1), opts)?.value[0],
            _ => {
                return Err(Error::UnsupportedGeometry(
                    "normalization is implemented for m ≤ 2".into(),
                ))
            }
        }
    };
    if !(normalization > 0.0) {
        return Err(Error::Numeric("marginal normalization vanished".into()));
    }

    let per_node = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let z = grid.node(i);
            let v = fiber_integral(&z, true)?;
            let w = v[0];
            if !(w > 0.0) {
                return Ok((None, 0.0));
            }
            let b = v.rows(1, m).into_owned() / w;
            let phi = Matrix::from_column_slice(m, m, v.rows(1 + m, m * m).as_slice()) / w;
            let a = Matrix::from_column_slice(m, m, v.rows(1 + m + m * m, m * m).as_slice()) / w;
            Ok((
                Some(NodeMeans {
                    b,
                    b_se: Vector::zeros(m),
                    phi,
                    a,
                    count: 0,
                }),
                w / normalization,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nodes, q): (Vec<_>, Vec<_>) = per_node.into_iter().unzip();
    EffectiveModel::assemble(grid.clone(), EstimationMethod::Quadrature, spec.beta(), nodes, Some(q))
}

/// Monte Carlo estimates of `κ₁²` and `κ₂²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaEstimate {
    pub kappa1_sq: f64,
    pub kappa1_sq_se: f64,
    pub kappa2_sq: f64,
    pub kappa2_sq_se: f64,
    pub used: u64,
    pub rejected: u64,
}

impl KappaEstimate {
    pub fn kappa1(&self) -> f64 {
        self.kappa1_sq.max(0.0).sqrt()
    }
    pub fn kappa2(&self) -> f64 {
        self.kappa2_sq.max(0.0).sqrt()
    }
}

/// `κ₁² = E_μ Σᵢ (Π∇Lξᵢ)·(aΠ∇Lξᵢ)` and `κ₂² = E_μ Σᵢⱼ (Π∇Aᵢⱼ)·(aΠ∇Aᵢⱼ)`,
/// with the gradients of `Lξ` and `A` taken by central differences of the
/// composite evaluations (through the SPD square root for `A`).
pub fn estimate_kappas(spec: &SystemSpec, samples: &[Vector]) -> Result<KappaEstimate> {
    let (n, m) = (spec.n(), spec.m());
    let per_sample = |x: &Vector| -> Result<(f64, f64)> {
        let frame = LevelSetFrame::new(spec, x)?;
        let lxi_jac = fd_jacobian(
            |p| {
                spec.generator_xi(p)
                    .unwrap_or_else(|_| Vector::from_element(m, f64::NAN))
            },
            x,
        )?;
        let a_derivs = fd_matrix_derivatives(
            |p| {
                phi_matrix(spec, p)
                    .and_then(|phi| spd_sqrt(&phi))
                    .unwrap_or_else(|_| Matrix::from_element(m, m, f64::NAN))
            },
            x,
        )?;
        let quad = |g: Vector| {
            let v = &frame.pi * g;
            v.dot(&(&frame.mobility * &v))
        };
        let k1: f64 = (0..m).map(|i| quad(lxi_jac.row(i).transpose())).sum();
        let mut k2 = 0.0;
        for i in 0..m {
            for j in 0..m {
                k2 += quad(Vector::from_iterator(n, a_derivs.iter().map(|d| d[(i, j)])));
            }
        }
        if k1.is_finite() && k2.is_finite() {
            Ok((k1, k2))
        } else {
            Err(Error::Evaluation("non-finite composite derivative".into()))
        }
    };
    let results: Vec<Result<(f64, f64)>> = samples.par_iter().map(per_sample).collect();
    let (mut s1, mut s2) = (RunningStats::new(), RunningStats::new());
    let mut rejected = 0u64;
    for r in results {
        match r {
            Ok((a, b)) => {
                s1.push(a);
                s2.push(b);
            }
            Err(Error::Evaluation(_)) | Err(Error::DegenerateCoordinate(_)) | Err(Error::NearSingular(_)) => {
                rejected += 1
            }
            Err(e) => return Err(e),
        }
    }
    if rejected as f64 > MAX_REJECTED_FRACTION * samples.len() as f64 {
        return Err(Error::Estimation(format!(
            "{rejected} of {} samples rejected while estimating κ",
            samples.len()
        )));
    }
    if s1.count() == 0 {
        return Err(Error::Estimation("no samples for κ estimation".into()));
    }
    Ok(KappaEstimate {
        kappa1_sq: s1.mean(),
        kappa1_sq_se: s1.stderr(),
        kappa2_sq: s2.mean(),
        kappa2_sq_se: s2.stderr(),
        used: s1.count(),
        rejected,
    })
}

/// Resolution of the fiber discretization used by [`estimate_rho`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoOptions {
    pub cells: usize,
    /// Parameter range is trimmed to where `log w ≥ max log w − trim`.
    pub trim: f64,
}

impl Default for RhoOptions {
    fn default() -> Self {
        Self { cells: 400, trim: 40.0 }
    }
}

/// Spectral gap of `−L₀` on a one-dimensional fiber `Σ_z`.
///
/// In a chart `s ↦ x(s)` with tangent `t`, the Dirichlet form is
/// `β⁻¹ ∫ D(s) f′(s)² w(s) ds` with `D = (Πt)·(aΠt)/|t|⁴` and `w` the `μ_z`
/// density in `s`. This is discretized by finite volumes (Neumann ends, or
/// wrap-around for periodic charts) and the second-smallest eigenvalue of
/// the symmetrized operator is returned.
pub fn estimate_rho(spec: &SystemSpec, chart: &FiberChart, z: &Vector, opts: &RhoOptions) -> Result<f64> {
    if chart.dim() != 1 || spec.n() - spec.m() != 1 {
        return Err(Error::UnsupportedGeometry(format!(
            "spectral gap estimation needs a one-dimensional fiber (n − m = {})",
            spec.n() - spec.m()
        )));
    }
    if opts.cells < 8 {
        return Err(Error::Config("at least 8 cells are needed".into()));
    }
    let axis = chart.axes(z)[0];
    let log_w = |s: f64| chart_log_weight(spec, chart, z, &[s]).map(|(_, lw)| lw);
    let (mut lo, mut hi) = (axis.lo, axis.hi);
    if !axis.periodic {
        // trim the range to where the weight is not negligible
        let probe = 4 * opts.cells;
        let h = (hi - lo) / probe as f64;
        let lws = (0..=probe)
            .map(|i| log_w(lo + i as f64 * h))
            .collect::<Result<Vec<f64>>>()?;
        let max = lws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let keep: Vec<usize> = (0..=probe).filter(|&i| lws[i] >= max - opts.trim).collect();
        let (first, last) = (keep[0], keep[keep.len() - 1]);
        lo += first.saturating_sub(1) as f64 * h;
        hi = axis.lo + (last + 1).min(probe) as f64 * h;
    }
    let n = opts.cells;
    let h = (hi - lo) / n as f64;
    let centre = |i: usize| lo + (i as f64 + 0.5) * h;
    let face = |i: usize| lo + i as f64 * h;

    let diffusivity = |s: f64| -> Result<f64> {
        let x = chart.embed(z, &[s]);
        let t: Vector = chart.tangents(z, &[s]).column(0).into_owned();
        let frame = LevelSetFrame::new(spec, &x)?;
        let pt = &frame.pi * &t;
        Ok(pt.dot(&(&frame.mobility * &pt)) / t.norm_squared().powi(2))
    };

    let lw_cells = (0..n).map(|i| log_w(centre(i))).collect::<Result<Vec<f64>>>()?;
    let n_faces = if axis.periodic { n } else { n - 1 };
    // face k sits between cells k and k+1 (mod n when periodic)
    let face_pos = |k: usize| face(k + 1);
    let lw_faces = (0..n_faces).map(|k| log_w(face_pos(k))).collect::<Result<Vec<f64>>>()?;
    let d_faces = (0..n_faces)
        .map(|k| diffusivity(face_pos(k)))
        .collect::<Result<Vec<f64>>>()?;
    let shift = lw_cells
        .iter()
        .chain(&lw_faces)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let mass: Vec<f64> = lw_cells.iter().map(|l| (l - shift).exp() * h).collect();
    let mut k = Matrix::zeros(n, n);
    for f in 0..n_faces {
        let (i, j) = (f, (f + 1) % n);
        let c = d_faces[f] * (lw_faces[f] - shift).exp() / (spec.beta() * h);
        k[(i, i)] += c;
        k[(j, j)] += c;
        k[(i, j)] -= c;
        k[(j, i)] -= c;
    }
    let inv_sqrt_mass: Vec<f64> = mass.iter().map(|v| 1.0 / v.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] *= inv_sqrt_mass[i] * inv_sqrt_mass[j];
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entries in the fiber generator".into()));
    }
    let mut eig: Vec<f64> = k.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let gap = eig[1];
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(Error::Numeric(format!("spectral gap estimate {gap} is not positive")));
    }
    Ok(gap)
}

/// `ρ(z)` at every grid node and the minimum over nodes.
pub fn rho_profile(spec: &SystemSpec, chart: &FiberChart, grid: &ZGrid, opts: &RhoOptions) -> Result<(Vec<f64>, f64)> {
    let rhos = (0..grid.len())
        .into_par_iter()
        .map(|i| estimate_rho(spec, chart, &grid.node(i), opts))
        .collect::<Result<Vec<f64>>>()?;
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((rhos, min))
}

/// Grid-based lower estimates of the Lipschitz constants of `b̃` and `σ̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub l_b: f64,
    pub l_sigma: f64,
}

/// Maximum difference quotients over adjacent populated node pairs.
pub fn estimate_lipschitz(model: &EffectiveModel) -> Result<LipschitzEstimate> {
    estimate_lipschitz_masked(model, |_| true)
}

/// As [`estimate_lipschitz`], restricted to nodes accepted by `include`.
pub fn estimate_lipschitz_masked(model: &EffectiveModel, include: impl Fn(usize) -> bool) -> Result<LipschitzEstimate> {
    let grid = &model.grid;
    let usable = |i: usize| !model.missing[i] && include(i);
    let (mut l_b, mut l_sigma) = (0.0f64, 0.0f64);
    let mut pairs = 0usize;
    for i in 0..grid.len() {
        if !usable(i) {
            continue;
        }
        let idx = grid.multi_index(i);
        for k in 0..grid.dim() {
            if idx[k] + 1 >= grid.axes()[k].len() {
                continue;
            }
            let mut nb = idx.clone();
            nb[k] += 1;
            let j = grid.flat_index(&nb);
            if !usable(j) {
                continue;
            }
            let dz = grid.axes()[k][idx[k] + 1] - grid.axes()[k][idx[k]];
            l_b = l_b.max((&model.b_tilde[j] - &model.b_tilde[i]).norm() / dz);
            l_sigma = l_sigma.max((&model.sigma_tilde[j] - &model.sigma_tilde[i]).norm() / dz);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Estimation("no adjacent populated node pairs".into()));
    }
    Ok(LipschitzEstimate { l_b, l_sigma })
}

/// Largest `L_d` consistent with `(b̃(z) − b̃(z′))·(z − z′) ≤ −L_d |z − z′|²`
/// over all pairs of nodes accepted by `include` (an upper estimate of the
/// true constant).
pub fn estimate_dissipativity(model: &EffectiveModel, include: impl Fn(usize) -> bool) -> Result<f64> {
    let nodes: Vec<usize> = (0..model.grid.len())
        .filter(|&i| !model.missing[i] && include(i))
        .collect();
    if nodes.len() < 2 {
        return Err(Error::Estimation("need at least two populated nodes".into()));
    }
    let mut l_d = f64::INFINITY;
    for (a, &i) in nodes.iter().enumerate() {
        let zi = model.grid.node(i);
        for &j in &nodes[a + 1..] {
            let dz = model.grid.node(j) - &zi;
            let db = &model.b_tilde[j] - &model.b_tilde[i];
            l_d = l_d.min(-db.dot(&dz) / dz.norm_squared());
        }
    }
    Ok(l_d)
}

/// Equilibrium averages of the fluctuation quantities that enter the error
/// analysis, evaluated with the coefficients of `model`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationReport {
    /// `|φ|²` with `φ = Lξ − b̃∘ξ`.
    pub phi_sq: RunningStats,
    /// `‖A − σ̃∘ξ‖²_F`.
    pub a_minus_sigma: RunningStats,
    /// `‖A − (E_{μ_z}A)∘ξ‖²_F`.
    pub a_minus_mean: RunningStats,
    /// `‖(σ̃ − E_{μ_z}A)∘ξ‖²_F`.
    pub sigma_minus_mean: RunningStats,
    /// Per-sample `‖A − σ̃‖² − ‖A − Ā‖² − ‖σ̃ − Ā‖²`, whose mean vanishes.
    pub decomposition_residual: RunningStats,
}

pub fn fluctuation_moments(spec: &SystemSpec, model: &EffectiveModel, samples: &[Vector]) -> Result<FluctuationReport> {
    let mut rep = FluctuationReport {
        phi_sq: RunningStats::new(),
        a_minus_sigma: RunningStats::new(),
        a_minus_mean: RunningStats::new(),
        sigma_minus_mean: RunningStats::new(),
        decomposition_residual: RunningStats::new(),
    };
    for x in samples {
        let z = spec.xi(x);
        let (lxi, _, a) = local_coefficients(spec, x)?;
        let (b, _) = model.b_at(&z);
        let (sigma, _) = model.sigma_at(&z)?;
        let (abar, _) = model.a_mean_at(&z);
        let t1 = (&a - &sigma).norm_squared();
        let t2 = (&a - &abar).norm_squared();
        let t3 = (&sigma - &abar).norm_squared();
        rep.phi_sq.push((lxi - b).norm_squared());
        rep.a_minus_sigma.push(t1);
        rep.a_minus_mean.push(t2);
        rep.sigma_minus_mean.push(t3);
        rep.decomposition_residual.push(t1 - t2 - t3);
    }
    Ok(rep)
}
