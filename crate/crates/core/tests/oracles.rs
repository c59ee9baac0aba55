//! Closed-form oracles with frozen reference values.

use wflow_core::diffeo::AffineMap;
use wflow_core::energy::{w_pushforward, EnergyIntegrand, PorousMedia};
use wflow_core::measure::{pushforward, wasserstein2_1d, GridDensity1d, Normal1d};
use wflow_core::pme::{solve, PmeGrid};
use wflow_core::quadrature::QuadratureGrid;
use wflow_core::reference::ReferenceMeasure;
use wflow_core::special::{normal_cdf, normal_quantile};

// −½ ln(2πe σ²) for σ = 1 and σ = 2, to 30 digits
const ENTROPY_N01: f64 = -1.418_938_533_204_672_741_780_329_736_41;
const ENTROPY_N04: f64 = -2.112_085_713_764_618_051_197_561_857_86;

/// The entropy preset is `s ln s − s`, so `W = ∫ ρ ln ρ − 1`. The λ-window
/// drops tails of mass `1e-8`, which moves the value by about `1e-7`.
#[test]
fn entropy_of_scaled_gaussians() {
    let r = ReferenceMeasure::<1>::gaussian(1.0).unwrap();
    let grid = QuadratureGrid::default_for(&r).unwrap();
    let f = EnergyIntegrand::entropy();
    let w1 = w_pushforward(&f, &r, &AffineMap::scaling(1.0), &grid).unwrap();
    let w2 = w_pushforward(&f, &r, &AffineMap::scaling(2.0), &grid).unwrap();
    assert!((w1 - (ENTROPY_N01 - 1.0)).abs() < 5e-7, "{w1}");
    assert!((w2 - (ENTROPY_N04 - 1.0)).abs() < 5e-7, "{w2}");
}

#[test]
fn normal_distribution_values() {
    assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_5).abs() < 1e-17);
    assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
}

#[test]
fn heat_kernel_spreads_gaussians() {
    let rho0 = PmeGrid::gaussian(-12.0, 12.0, 1024, 0.0, 1.0).unwrap();
    let times = [0.1, 0.25];
    let sol = solve(&rho0, &PorousMedia::heat(), &times, 0.9).unwrap();
    for (t, snap) in times.iter().zip(&sol.snapshots) {
        let var = 1.0 + 2.0 * t;
        assert!((snap.variance() - var).abs() < 1e-3, "t = {t}: {}", snap.variance());
        let oracle = GridDensity1d::new(snap.lo, snap.dx, &snap.rho).unwrap();
        let w2 = wasserstein2_1d(&oracle, &Normal1d { mean: 0.0, sd: var.sqrt() });
        assert!(w2 < 1e-2, "t = {t}: W2 {w2}");
    }
}

#[test]
fn scaled_reference_is_the_scaled_normal() {
    let r = ReferenceMeasure::<1>::gaussian(1.0).unwrap();
    let mu = pushforward(&r, AffineMap::scaling(1.5));
    assert!(wasserstein2_1d(&mu, &Normal1d { mean: 0.0, sd: 1.5 }) < 1e-12);
    assert!((wasserstein2_1d(&mu, &Normal1d { mean: 0.3, sd: 1.0 }) - (0.09f64 + 0.25).sqrt()).abs() < 1e-6);
}
