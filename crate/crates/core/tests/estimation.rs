//! Effective-coefficient estimators and co-simulation properties.

use effdyn::cli::equilibrium_samples;
use effdyn::coupled::{cosimulate, CosimConfig, Coupling};
use effdyn::effective::{
    estimate_binned_from_samples, estimate_fiber, estimate_kappas, fluctuation_moments, quadrature_oracle, rho_profile,
    EffectiveModel, RhoOptions, ZGrid,
};
use effdyn::model::Vector;
use effdyn::quadrature::QuadOptions;
use effdyn::sampler::{FiberConfig, IntegratorConfig, X0Source};
use effdyn::systems::{build, BuiltinSystem, SystemParams};

fn anisotropic_radial() -> BuiltinSystem {
    build(&SystemParams::named("radial2d").with("anisotropy", 2.0).unwrap()).unwrap()
}

fn assert_sigma_identity(model: &EffectiveModel) {
    for i in 0..model.grid.len() {
        let s = &model.sigma_tilde[i];
        let phi = &model.phi_mean[i];
        assert!((s * s - phi).norm() <= 1e-10 * phi.norm(), "node {i}");
    }
}

#[test]
fn binned_and_fiber_estimates_match_quadrature() {
    let sys = anisotropic_radial();
    let spec = &sys.spec;
    let chart = sys.chart.clone().unwrap();
    let grid = ZGrid::uniform(&[(0.5, 1.5, 51)]).unwrap();
    let oracle = quadrature_oracle(spec, &chart, &grid, &sys.support, &QuadOptions::default()).unwrap();
    let samples = equilibrium_samples(&sys, 400_000, 12);
    let binned = estimate_binned_from_samples(spec, &grid, &samples).unwrap();
    assert_sigma_identity(&oracle);
    assert_sigma_identity(&binned);

    let mut compared = 0;
    for i in 0..grid.len() {
        if binned.counts[i] < 1000 {
            continue;
        }
        compared += 1;
        let db = (binned.b_tilde[i][0] - oracle.b_tilde[i][0]).abs();
        let tol = (4.0 * binned.b_stderr[i][0]).max(0.05);
        assert!(db <= tol, "b̃ at node {i}: {db} > {tol}");
        let dphi = (binned.phi_mean[i][(0, 0)] - oracle.phi_mean[i][(0, 0)]).abs();
        assert!(dphi <= 0.05, "Φ̄ at node {i}: {dphi}");
    }
    assert!(compared >= 20);

    let coarse = ZGrid::uniform(&[(0.8, 1.2, 5)]).unwrap();
    let oracle = quadrature_oracle(spec, &chart, &coarse, &sys.support, &QuadOptions::default()).unwrap();
    let fc = FiberConfig::new(
        Vector::zeros(1),
        IntegratorConfig {
            dt: 1e-3,
            n_steps: 100_000,
            n_replicas: 4,
            seed: 5,
            ..Default::default()
        },
    );
    let fiber = estimate_fiber(spec, &coarse, &fc, &|z| chart.centre(z), None).unwrap();
    assert_sigma_identity(&fiber);
    for i in 0..coarse.len() {
        // Fiber samples are autocorrelated, so the naive stderr is far too small.
        let db = (fiber.b_tilde[i][0] - oracle.b_tilde[i][0]).abs();
        let tol = 0.05 + 0.04 * oracle.b_tilde[i][0].abs();
        assert!(db <= tol, "fiber b̃ at node {i}: {db} > {tol}");
        let dphi = (fiber.phi_mean[i][(0, 0)] - oracle.phi_mean[i][(0, 0)]).abs();
        assert!(dphi <= 0.05, "fiber Φ̄ at node {i}: {dphi}");
    }
}

#[test]
fn fluctuation_energy_is_below_the_poincare_bound() {
    let sys = anisotropic_radial();
    let spec = &sys.spec;
    let chart = sys.chart.clone().unwrap();
    let grid = ZGrid::uniform(&[(0.3, 2.0, 69)]).unwrap();
    let model = quadrature_oracle(spec, &chart, &grid, &sys.support, &QuadOptions::default()).unwrap();
    let samples = equilibrium_samples(&sys, 50_000, 6);
    let fl = fluctuation_moments(spec, &model, &samples).unwrap();
    let k = estimate_kappas(spec, &samples).unwrap();
    let (_, rho) = rho_profile(spec, &chart, &grid, &RhoOptions::default()).unwrap();
    let beta = spec.beta();
    let rhs = k.kappa1_sq / (beta * rho);
    let se = (fl.phi_sq.stderr().powi(2) + (k.kappa1_sq_se / (beta * rho)).powi(2)).sqrt();
    assert!(fl.phi_sq.mean() <= rhs + 3.0 * se, "{} vs {rhs}", fl.phi_sq.mean());
}

#[test]
fn coupling_shrinks_the_pathwise_error() {
    let sys = build(&SystemParams::named("case2-linear").with("delta", 0.02).unwrap()).unwrap();
    let spec = &sys.spec;
    let grid = ZGrid::uniform(&[(-6.0, 6.0, 121)]).unwrap();
    let model = quadrature_oracle(
        spec,
        sys.chart.as_ref().unwrap(),
        &grid,
        &sys.support,
        &QuadOptions::default(),
    )
    .unwrap();
    let x0 = X0Source::Equilibrium(sys.sampler.clone());
    let mut cfg = CosimConfig::new(4e-4, 1.0, 300, 2);
    let coupled = cosimulate(spec, &model, &cfg, &x0).unwrap();
    cfg.coupling = Coupling::Independent;
    let independent = cosimulate(spec, &model, &cfg, &x0).unwrap();
    let (mc, sc) = coupled.final_sup();
    let (mi, si) = independent.final_sup();
    assert!(
        mi - mc >= 3.0 * (sc * sc + si * si).sqrt(),
        "{mc} ± {sc} vs {mi} ± {si}"
    );

    for rep in [&coupled, &independent] {
        for (m, s) in rep.marginal_mse.iter().zip(&rep.mean_sq_sup) {
            assert!(m <= s);
        }
        assert!(rep.mean_sq_sup.windows(2).all(|w| w[0] <= w[1]));
    }
}
