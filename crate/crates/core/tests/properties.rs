//! Cross-module properties of the full system, its level-set geometry and
//! the samplers.

use effdyn::cli::equilibrium_samples;
use effdyn::geometry::{frobenius_obstruction, spd_sqrt, tangent_projector, LevelSetFrame};
use effdyn::model::{apply_generator, Matrix, ScalarField, SystemSpec, Vector};
use effdyn::rng::{NoiseStream, StreamPurpose};
use effdyn::sampler::{simulate_fiber, simulate_full, FiberConfig, IntegratorConfig, X0Source};
use effdyn::stats::RunningStats;
use effdyn::systems::{build, BuiltinSystem, SystemParams, NAMES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn system(name: &str) -> BuiltinSystem {
    build(&SystemParams::named(name)).unwrap()
}

fn all_systems() -> Vec<BuiltinSystem> {
    let mut v: Vec<_> = NAMES.iter().map(|n| system(n)).collect();
    v.push(build(&SystemParams::named("radial2d").with("anisotropy", 2.0).unwrap()).unwrap());
    v
}

/// `Lξ_i` assembled from the `V`, `a` and `ξ` callbacks alone, with
/// central differences for every derivative.
fn generator_oracle(spec: &SystemSpec, x: &Vector, i: usize) -> f64 {
    let n = spec.n();
    let h1 = 1e-6;
    let h2 = 1e-4;
    let e = |k: usize, h: f64| {
        let mut v = Vector::zeros(n);
        v[k] = h;
        v
    };
    let xi = |p: &Vector| spec.xi(p)[i];
    let grad = |f: &dyn Fn(&Vector) -> f64, p: &Vector| {
        Vector::from_iterator(
            n,
            (0..n).map(|k| (f(&(p + e(k, h1))) - f(&(p - e(k, h1)))) / (2.0 * h1)),
        )
    };
    let v = |p: &Vector| spec.potential(p);
    let grad_v = grad(&v, x);
    let grad_xi = grad(&xi, x);
    let a = spec.mobility(x);
    let div_a = Vector::from_iterator(
        n,
        (0..n).map(|r| {
            (0..n)
                .map(|c| (spec.mobility(&(x + e(c, h1)))[(r, c)] - spec.mobility(&(x - e(c, h1)))[(r, c)]) / (2.0 * h1))
                .sum::<f64>()
        }),
    );
    let mut hess = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            hess[(r, c)] =
                (xi(&(x + e(r, h2) + e(c, h2))) - xi(&(x + e(r, h2) - e(c, h2))) - xi(&(x - e(r, h2) + e(c, h2)))
                    + xi(&(x - e(r, h2) - e(c, h2))))
                    / (4.0 * h2 * h2);
        }
    }
    let beta = spec.beta();
    -(&a * grad_v).dot(&grad_xi) + div_a.dot(&grad_xi) / beta + a.component_mul(&hess).sum() / beta
}

#[test]
fn generator_matches_callback_only_finite_differences() {
    for sys in all_systems() {
        let spec = &sys.spec;
        for (k, x) in equilibrium_samples(&sys, 20, 5).iter().enumerate() {
            let l = spec.generator_xi(x).unwrap();
            for i in 0..spec.m() {
                let oracle = generator_oracle(spec, x, i);
                assert!(
                    (l[i] - oracle).abs() <= 1e-5 * oracle.abs().max(1.0),
                    "{} sample {k}: {} vs {oracle}",
                    spec.name(),
                    l[i]
                );
            }
        }
    }
}

/// `(R² − |x − c|²)₊⁴` with analytic derivatives.
fn bump(c: Vector, r: f64) -> ScalarField {
    let (c1, c2, c3) = (c.clone(), c.clone(), c);
    ScalarField::new(move |x| (r * r - (x - &c1).norm_squared()).max(0.0).powi(4))
        .with_gradient(move |x| {
            let d = x - &c2;
            let s = (r * r - d.norm_squared()).max(0.0);
            d * (-8.0 * s.powi(3))
        })
        .with_hessian(move |x| {
            let d = x - &c3;
            let n = d.len();
            let s = (r * r - d.norm_squared()).max(0.0);
            &d * d.transpose() * (48.0 * s * s) - Matrix::identity(n, n) * (8.0 * s.powi(3))
        })
}

#[test]
fn integration_by_parts_under_equilibrium() {
    for (name, aniso) in [("case2-linear", 1.0), ("radial2d", 2.0)] {
        let sys = build(&SystemParams::named(name).with("anisotropy", aniso).unwrap()).unwrap();
        let spec = &sys.spec;
        let f = bump(Vector::from_vec(vec![0.3, 0.2]), 1.2);
        let h = bump(Vector::from_vec(vec![-0.1, 0.5]), 1.0);
        let mut stats = RunningStats::new();
        for x in equilibrium_samples(&sys, 200_000, 9) {
            let lf = apply_generator(spec, &f, &x).unwrap();
            let (gf, _) = f.derivatives(&x).unwrap();
            let (gh, _) = h.derivatives(&x).unwrap();
            stats.push(lf * h.value(&x) + (spec.mobility(&x) * gf).dot(&gh) / spec.beta());
        }
        assert!(
            stats.mean().abs() <= 3.0 * stats.stderr(),
            "{name}: {} ± {}",
            stats.mean(),
            stats.stderr()
        );
    }
}

proptest! {
    #[test]
    fn spd_sqrt_is_homogeneous(entries in proptest::collection::vec(-1.0..1.0f64, 9), c in 0.1..10.0f64) {
        let b = Matrix::from_row_slice(3, 3, &entries);
        let m = &b * b.transpose() + Matrix::identity(3, 3) * 0.1;
        let lhs = spd_sqrt(&(&m * (c * c))).unwrap();
        let rhs = spd_sqrt(&m).unwrap() * c;
        prop_assert!((&lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }
}

#[test]
fn skew_projection_does_not_shrink_tangent_vectors() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(17);
    for sys in all_systems() {
        for x in equilibrium_samples(&sys, 100, 3) {
            let frame = LevelSetFrame::new(&sys.spec, &x).unwrap();
            let p = tangent_projector(&sys.spec, &x).unwrap();
            for _ in 0..20 {
                let v = Vector::from_iterator(x.len(), (0..x.len()).map(|_| rng.random_range(-1.0..1.0)));
                let eta = &p * v;
                let pe = &frame.pi * &eta;
                assert!(pe.norm() >= eta.norm() * (1.0 - 1e-12), "{}", sys.spec.name());
                assert!((frame.pi.transpose() * &eta - &eta).norm() <= 1e-10 * eta.norm().max(1e-300));
            }
        }
    }
}

#[test]
fn obstruction_is_invariant_under_reordering_and_sign() {
    let base = system("polar-pair");
    let counter = system("frobenius-counterexample");
    for sys in [base, counter] {
        let spec = sys.spec.clone();
        let swapped = {
            let s1 = spec.clone();
            let s2 = spec.clone();
            SystemSpec::builder(spec.n(), 2)
                .beta(spec.beta())
                .potential(move |x| s1.potential(x))
                .mobility(move |x| s2.mobility(x))
                .xi({
                    let s = spec.clone();
                    move |x| {
                        let v = s.xi(x);
                        Vector::from_vec(vec![-v[1], v[0]])
                    }
                })
                .xi_jac({
                    let s = spec.clone();
                    move |x| {
                        let j = s.xi_jac(x).unwrap();
                        let mut out = j.clone();
                        out.set_row(0, &(-j.row(1)));
                        out.set_row(1, &j.row(0));
                        out
                    }
                })
                .xi_hess({
                    let s = spec.clone();
                    move |x, i| {
                        if i == 0 {
                            -s.xi_hess(x, 1).unwrap()
                        } else {
                            s.xi_hess(x, 0).unwrap()
                        }
                    }
                })
                .build()
                .unwrap()
        };
        for x in equilibrium_samples(&sys, 20, 4) {
            let r1 = frobenius_obstruction(&spec, &x).unwrap().residual;
            let r2 = frobenius_obstruction(&swapped, &x).unwrap().residual;
            assert!((r1 - r2).abs() <= 1e-8 * r1.max(1.0), "{r1} vs {r2}");
        }
    }
}

#[test]
fn noise_streams_are_reproducible_and_uncorrelated() {
    let n = 100_000u64;
    let mut a = NoiseStream::new(21, 0, StreamPurpose::Dynamics, 2);
    let mut a2 = NoiseStream::new(21, 0, StreamPurpose::Dynamics, 2);
    let mut b = NoiseStream::new(21, 1, StreamPurpose::Dynamics, 2);
    let mut cross = RunningStats::new();
    for k in 0..n {
        let u = a.increment(k, 1.0);
        assert_eq!(u, a2.increment(k, 1.0));
        let v = b.increment(k, 1.0);
        cross.push(u[0] * v[0]);
    }
    assert!(cross.mean().abs() <= 3.0 / (n as f64).sqrt(), "{}", cross.mean());
}

#[test]
fn fiber_dynamics_stay_on_the_level_set() {
    let sys = build(&SystemParams::named("radial2d").with("anisotropy", 2.0).unwrap()).unwrap();
    let z = Vector::from_element(1, 1.1);
    let fc = FiberConfig::new(
        z.clone(),
        IntegratorConfig {
            dt: 1e-3,
            n_steps: 100_000,
            burn_in_steps: Some(0),
            seed: 8,
            ..Default::default()
        },
    );
    let x0 = Vector::from_vec(vec![1.1, 0.0]);
    let mut worst: f64 = 0.0;
    for p in simulate_fiber(&sys.spec, &fc, &x0, 0).unwrap() {
        let p = p.unwrap();
        worst = worst.max((sys.spec.xi(&p.x) - &z).norm());
    }
    assert!(worst <= fc.newton_tol, "{worst}");
}

#[test]
fn ou_autocovariance_decays_exponentially() {
    let sys = system("ou2d");
    let dt = 0.01;
    let cfg = IntegratorConfig {
        dt,
        n_steps: 200_000,
        burn_in_steps: Some(0),
        seed: 4,
        ..Default::default()
    };
    let lags = [10usize, 25, 50, 100];
    let mut acc = vec![RunningStats::new(); lags.len()];
    let mut var = RunningStats::new();
    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    for r in 0..20 {
        let xs: Vec<f64> = simulate_full(&sys.spec, &cfg, &x0, r)
            .unwrap()
            .map(|p| p.unwrap().x[0])
            .collect();
        for x in &xs {
            var.push(x * x);
        }
        for (j, &k) in lags.iter().enumerate() {
            for i in 0..xs.len() - k {
                acc[j].push(xs[i] * xs[i + k]);
            }
        }
    }
    for (j, &k) in lags.iter().enumerate() {
        let expected = (-(k as f64) * dt).exp();
        let got = acc[j].mean() / var.mean();
        assert!(
            (got - expected).abs() <= 0.05 * expected,
            "lag {k}: {got} vs {expected}"
        );
    }
}
