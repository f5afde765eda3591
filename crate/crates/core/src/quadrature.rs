//! Adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::Vector;

// Kronrod abscissae on [0, 1]; odd indices are the Gauss points.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-11,
            max_intervals: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadResult {
    pub value: Vector,
    /// Estimated absolute error (max-norm over components).
    pub error: f64,
}

struct Piece {
    a: f64,
    b: f64,
    value: Vector,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F>(f: &mut F, a: f64, b: f64) -> Result<Piece>
where
    F: FnMut(f64) -> Result<Vector>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut k = &fc * WGK[7];
    let mut g = &fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x)? + f(c + x)?;
        k += &s * WGK[j];
        if j % 2 == 1 {
            g += &s * WG[j / 2];
        }
    }
    k *= h;
    g *= h;
    let error = (&k - &g).amax();
    if !error.is_finite() {
        return Err(Error::Evaluation(format!("non-finite integrand on [{a}, {b}]")));
    }
    Ok(Piece { a, b, value: k, error })
}

/// Integrates `f` over `[a, b]`, bisecting the interval with the largest
/// error estimate until the total estimate meets the tolerance.
pub fn integrate<F>(mut f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<QuadResult>
where
    F: FnMut(f64) -> Result<Vector>,
{
    let first = kronrod(&mut f, a, b)?;
    let mut total = first.value.clone();
    let mut error = first.error;
    let mut heap = BinaryHeap::from([first]);
    while error > opts.abs_tol.max(opts.rel_tol * total.amax()) {
        if heap.len() >= opts.max_intervals {
            return Err(Error::Quadrature { achieved: error });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        let left = kronrod(&mut f, worst.a, mid)?;
        let right = kronrod(&mut f, mid, worst.b)?;
        total += &left.value + &right.value - &worst.value;
        error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        if heap.len() % 64 == 0 {
            // refresh running sums against accumulated cancellation
            total = heap.iter().fold(Vector::zeros(total.len()), |acc, p| acc + &p.value);
            error = heap.iter().map(|p| p.error).sum();
        }
    }
    let value = heap.iter().fold(Vector::zeros(total.len()), |acc, p| acc + &p.value);
    let error = heap.iter().map(|p| p.error).sum();
    Ok(QuadResult { value, error })
}

/// Iterated integral over `[a0, b0] × [a1, b1]`; the inner integral runs
/// with a tighter tolerance so its error does not dominate the outer one.
pub fn integrate_2d<F>(f: F, (a0, b0): (f64, f64), (a1, b1): (f64, f64), opts: &QuadOptions) -> Result<QuadResult>
where
    F: Fn(f64, f64) -> Result<Vector>,
{
    let inner = QuadOptions {
        abs_tol: 0.1 * opts.abs_tol / (b0 - a0).abs().max(1.0),
        rel_tol: 0.1 * opts.rel_tol,
        ..*opts
    };
    integrate(
        |s0| integrate(|s1| f(s0, s1), a1, b1, &inner).map(|r| r.value),
        a0,
        b0,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Result<Vector> {
        Ok(Vector::from_element(1, v))
    }

    #[test]
    fn kronrod_rule_is_exact_for_degree_22() {
        // a single 15-point Kronrod panel integrates polynomials of degree ≤ 22 exactly
        let mut f = |x: f64| scalar(x.powi(22) + 3.0 * x.powi(7));
        let p = kronrod(&mut f, -1.0, 1.0).unwrap();
        assert!((p.value[0] - 2.0 / 23.0).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_interval_length() {
        let mut f = |_: f64| scalar(1.0);
        let p = kronrod(&mut f, 0.0, 3.0).unwrap();
        assert!((p.value[0] - 3.0).abs() < 1e-14);
        assert!(p.error < 1e-14);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let f = |x: f64| scalar((-0.5 * x * x).exp() / (std::f64::consts::TAU).sqrt());
        let r = integrate(f, -12.0, 12.0, &QuadOptions::default()).unwrap();
        assert!((r.value[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vector_integrand_and_peaked_function() {
        let f = |x: f64| Ok(Vector::from_vec(vec![x.sin(), 1.0 / (1e-4 + (x - 0.3).powi(2))]));
        let r = integrate(f, 0.0, 1.0, &QuadOptions::default()).unwrap();
        assert!((r.value[0] - (1.0 - 1f64.cos())).abs() < 1e-12);
        let exact = 100.0 * ((70.0f64).atan() + (30.0f64).atan());
        assert!((r.value[1] - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn two_dimensional_product() {
        let f = |x: f64, y: f64| scalar(x.exp() * y.cos());
        let r = integrate_2d(f, (0.0, 1.0), (0.0, 2.0), &QuadOptions::default()).unwrap();
        let exact = (1f64.exp() - 1.0) * 2f64.sin();
        assert!((r.value[0] - exact).abs() < 1e-11);
    }

    #[test]
    fn non_convergence_reports_achieved_error() {
        let opts = QuadOptions {
            max_intervals: 4,
            ..Default::default()
        };
        let f = |x: f64| scalar(x.powf(-0.9));
        assert!(matches!(integrate(f, 0.0, 1.0, &opts), Err(Error::Quadrature { .. })));
    }
}
