//! Explicit finite-volume solver for `∂_t ρ = Δβ(ρ) + div(∇Φ b(ρ) ρ)` in `d = 1`
//! with zero-flux boundaries.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::energy::{w_cells, EnergyIntegrand, PorousMedia};
use crate::error::{Error, Result};
use crate::special::normal_cdf;

/// Cell averages on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PmeGrid {
    pub lo: f64,
    pub dx: f64,
    pub rho: Vec<f64>,
    pub time: f64,
}

impl PmeGrid {
    pub fn new(lo: f64, hi: f64, cells: usize, rho: Vec<f64>) -> Result<Self> {
        if cells < 3 || rho.len() != cells || !(hi > lo) {
            return Err(Error::InvalidParameter { name: "pme_grid", reason: format!("need ≥ 3 cells on a nonempty window, got {cells}") });
        }
        if rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter { name: "rho0", reason: "densities must be finite and nonnegative".into() });
        }
        Ok(PmeGrid { lo, dx: (hi - lo) / cells as f64, rho, time: 0.0 })
    }

    /// Exact cell averages of `N(mean, variance)` on `[lo, hi]`.
    pub fn gaussian(lo: f64, hi: f64, cells: usize, mean: f64, variance: f64) -> Result<Self> {
        let dx = (hi - lo) / cells as f64;
        let sd = variance.sqrt();
        let rho = (0..cells)
            .map(|i| {
                let a = (lo + i as f64 * dx - mean) / sd;
                let b = (lo + (i + 1) as f64 * dx - mean) / sd;
                gaussian_mass(a, b) / dx
            })
            .collect();
        PmeGrid::new(lo, hi, cells, rho)
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.dx * self.rho.len() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dx
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.dx
    }

    pub fn mean(&self) -> f64 {
        (0..self.rho.len()).map(|i| self.rho[i] * self.center(i)).sum::<f64>() * self.dx / self.mass()
    }

    /// Second central moment, with the in-cell variance `dx²/12` of a piecewise constant density.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let s: f64 = (0..self.rho.len()).map(|i| self.rho[i] * (self.center(i) - m).powi(2)).sum::<f64>() * self.dx;
        s / self.mass() + self.dx * self.dx / 12.0
    }

    /// `Σ |ρ_i − ρ̄_i| Δx` against exact cell averages of `N(mean, variance)`.
    pub fn l1_to_gaussian(&self, mean: f64, variance: f64) -> f64 {
        let sd = variance.sqrt();
        (0..self.rho.len())
            .map(|i| {
                let a = (self.lo + i as f64 * self.dx - mean) / sd;
                let b = (self.lo + (i + 1) as f64 * self.dx - mean) / sd;
                (self.rho[i] * self.dx - gaussian_mass(a, b)).abs()
            })
            .sum()
    }
}

fn gaussian_mass(a: f64, b: f64) -> f64 {
    // tails by symmetry to keep relative accuracy
    if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Largest stable explicit step: `1 / (2 sup β′ / Δx² + sup|∇Φ| sup (bρ)′ / Δx)`.
pub fn cfl_bound(grid: &PmeGrid, pm: &PorousMedia) -> f64 {
    let (_, beta_max) = pm.beta.deriv_range();
    let (_, b_max) = pm.mobility.range();
    let grad_phi = (0..=grid.rho.len()).map(|i| pm.phi.grad(&[grid.lo + i as f64 * grid.dx])[0].abs()).fold(0.0, f64::max);
    // (bρ)′ = b + b′ρ ≤ b_max + sup b′ · sup ρ
    let rho_max = grid.rho.iter().copied().fold(0.0, f64::max);
    let b_slope = match pm.mobility {
        crate::energy::Mobility::Constant(_) => 0.0,
        crate::energy::Mobility::Saturating { b1, r0, .. } => b1.abs() / r0,
    };
    let adv = grad_phi * (b_max + b_slope * rho_max);
    1.0 / (2.0 * beta_max / (grid.dx * grid.dx) + adv / grid.dx)
}

/// One conservative update: central `Δβ(ρ)`, upwinded drift flux.
pub fn step(grid: &PmeGrid, pm: &PorousMedia, dt: f64) -> Result<PmeGrid> {
    let bound = cfl_bound(grid, pm);
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, bound });
    }
    let n = grid.rho.len();
    let beta: Vec<f64> = grid.rho.iter().map(|r| pm.beta.value(*r)).collect();
    let carried: Vec<f64> = grid.rho.iter().map(|r| pm.mobility.value(*r) * r).collect();
    // flux through the interface between cells i-1 and i, i = 1..n-1
    let mut flux = alloc::vec![0.0; n + 1];
    for i in 1..n {
        let x = grid.lo + i as f64 * grid.dx;
        let v = -pm.phi.grad(&[x])[0];
        let adv = if v > 0.0 { v * carried[i - 1] } else { v * carried[i] };
        flux[i] = -(beta[i] - beta[i - 1]) / grid.dx + adv;
    }
    let r = dt / grid.dx;
    let rho = (0..n).map(|i| grid.rho[i] - r * (flux[i + 1] - flux[i])).collect();
    Ok(PmeGrid { lo: grid.lo, dx: grid.dx, rho, time: grid.time + dt })
}

/// Snapshots and the Lyapunov series of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct PmeSolution {
    pub snapshots: Vec<PmeGrid>,
    /// `(t, W_F(ρ_t dx))` after every step
    pub lyapunov: Vec<(f64, f64)>,
    pub steps: usize,
    pub max_mass_drift: f64,
}

impl PmeSolution {
    pub fn lyapunov_nonincreasing(&self, tol: f64) -> bool {
        self.lyapunov.windows(2).all(|w| w[1].1 <= w[0].1 + tol)
    }
}

/// Integrates to each of `times` (sorted, nonnegative) at `safety · cfl` steps.
pub fn solve(rho0: &PmeGrid, pm: &PorousMedia, times: &[f64], safety: f64) -> Result<PmeSolution> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::InvalidParameter { name: "safety", reason: format!("must lie in (0, 1], got {safety}") });
    }
    if (rho0.mass() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter { name: "rho0", reason: format!("mass {} is not 1", rho0.mass()) });
    }
    let f = EnergyIntegrand::porous_media(*pm)?;
    let m0 = rho0.mass();
    let mut cur = rho0.clone();
    let mut out = PmeSolution { snapshots: Vec::new(), lyapunov: alloc::vec![(0.0, w_cells(&f, cur.lo, cur.dx, &cur.rho))], steps: 0, max_mass_drift: 0.0 };
    for &t in times {
        while cur.time < t - 1e-15 {
            let dt = (safety * cfl_bound(&cur, pm)).min(t - cur.time);
            cur = step(&cur, pm, dt)?;
            out.steps += 1;
            out.max_mass_drift = out.max_mass_drift.max((cur.mass() - m0).abs());
            out.lyapunov.push((cur.time, w_cells(&f, cur.lo, cur.dx, &cur.rho)));
        }
        out.snapshots.push(cur.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{Beta, Mobility, Potential};

    #[test]
    fn uniform_density_is_stationary() {
        let g = PmeGrid::new(-1.0, 1.0, 64, alloc::vec![0.5; 64]).unwrap();
        let pm = PorousMedia { phi: Potential { offset: 2.0, ..Potential::default() }, ..PorousMedia::heat() };
        let s = step(&g, &pm, 0.5 * cfl_bound(&g, &pm)).unwrap();
        assert!(s.rho.iter().all(|r| (r - 0.5).abs() < 1e-15));
    }

    #[test]
    fn cfl_violation_is_an_error() {
        let g = PmeGrid::gaussian(-8.0, 8.0, 256, 0.0, 1.0).unwrap();
        let pm = PorousMedia::heat();
        assert!(matches!(step(&g, &pm, 2.0 * cfl_bound(&g, &pm)), Err(Error::Cfl { .. })));
    }

    #[test]
    fn heat_kernel() {
        let g = PmeGrid::gaussian(-12.0, 12.0, 1024, 0.0, 1.0).unwrap();
        let sol = solve(&g, &PorousMedia::heat(), &[0.25, 0.5], 0.9).unwrap();
        assert!((sol.snapshots[0].variance() - 1.5).abs() < 1e-3);
        assert!(sol.snapshots[1].l1_to_gaussian(0.0, 2.0) < 1e-3);
        assert!(sol.max_mass_drift < 1e-10);
        assert!(sol.lyapunov_nonincreasing(0.0));
        assert!(sol.snapshots.iter().all(|s| s.rho.iter().all(|r| *r >= 0.0)));
    }

    #[test]
    fn nonlinear_coefficients_stay_positive() {
        let g = PmeGrid::gaussian(-10.0, 10.0, 400, 1.0, 0.5).unwrap();
        let pm = PorousMedia {
            phi: Potential { offset: 0.0, quadratic: 0.0, soft_abs: 1.0 },
            beta: Beta::Saturating { alpha: 1.0, delta: 1.0, r0: 0.2 },
            mobility: Mobility::Saturating { b0: 1.0, b1: 0.5, r0: 0.5 },
        };
        let sol = solve(&g, &pm, &[0.5], 0.9).unwrap();
        assert!(sol.max_mass_drift < 1e-10);
        assert!(sol.lyapunov_nonincreasing(1e-12));
        assert!(sol.snapshots[0].rho.iter().all(|r| *r >= 0.0));
    }
}
