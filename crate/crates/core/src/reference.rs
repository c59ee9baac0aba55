//! Base measures `λ` on `ℝ^d` with their analytic data.
//!
//! Two presets are provided: the isotropic Gaussian `N(0, v·I)` in `d ∈ {1, 2}`
//! and finite Gaussian mixtures in `d = 1`. Both have closed-form marginal CDFs
//! and quantiles, which the warped trigonometric basis and the quantile form
//! of `W₂` rely on.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{norm, scale, Point};
use crate::quadrature::{QuadratureGrid, Weighting, Window};
use crate::special::{normal_cdf, normal_pdf, normal_quantile, normal_sf, INV_SQRT_2PI};

/// Default probability mass left outside the quadrature window.
pub const DEFAULT_TAIL: f64 = 1e-8;

/// Anything with a density, its gradient and a log-density.
pub trait DensityModel<const D: usize> {
    fn density(&self, x: &Point<D>) -> f64;
    fn grad_density(&self, x: &Point<D>) -> Point<D>;
    fn log_density(&self, x: &Point<D>) -> f64 {
        self.density(x).ln()
    }
    /// `∇ρ/ρ`.
    fn score(&self, x: &Point<D>) -> Point<D> {
        scale(&self.grad_density(x), 1.0 / self.density(x))
    }
}

/// One component of a 1-d Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Gaussian { variance: f64, sd: f64 },
    Mixture(Vec<MixtureComponent>),
}

/// The reference measure `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeasure<const D: usize> {
    kind: Kind,
    tail: f64,
}

/// `N(0, variance·I)` on `ℝ^D`.
pub fn make_gaussian_reference<const D: usize>(variance: f64) -> Result<ReferenceMeasure<D>> {
    ReferenceMeasure::gaussian(variance)
}

impl<const D: usize> ReferenceMeasure<D> {
    pub fn gaussian(variance: f64) -> Result<Self> {
        check_dim::<D>()?;
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "variance",
                reason: alloc::format!("must be positive and finite, got {variance}"),
            });
        }
        Ok(ReferenceMeasure {
            kind: Kind::Gaussian { variance, sd: variance.sqrt() },
            tail: DEFAULT_TAIL,
        })
    }

    /// Override the tail mass excluded from the quadrature window.
    pub fn with_tail(mut self, tail: f64) -> Result<Self> {
        if !(tail > 0.0 && tail < 0.5) {
            return Err(Error::InvalidParameter {
                name: "tail",
                reason: alloc::format!("must lie in (0, 0.5), got {tail}"),
            });
        }
        self.tail = tail;
        Ok(self)
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn dim(&self) -> usize {
        D
    }

    /// Short identifier used in serialized artifacts.
    pub fn id(&self) -> alloc::string::String {
        match &self.kind {
            Kind::Gaussian { variance, .. } => alloc::format!("gauss(v={variance})"),
            Kind::Mixture(c) => {
                let mut s = alloc::string::String::from("gauss-mixture(");
                for (i, m) in c.iter().enumerate() {
                    if i > 0 {
                        s.push(';');
                    }
                    s.push_str(&alloc::format!("{},{},{}", m.weight, m.mean, m.sd));
                }
                s.push(')');
                s
            }
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, Kind::Gaussian { .. })
    }

    /// Density of a single coordinate marginal.
    pub fn marginal_density(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => normal_pdf(t / sd) / sd,
            Kind::Mixture(c) => c.iter().map(|m| m.weight * normal_pdf((t - m.mean) / m.sd) / m.sd).sum(),
        }
    }

    pub fn marginal_density_deriv(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, variance } => -t / variance * normal_pdf(t / sd) / sd,
            Kind::Mixture(c) => c
                .iter()
                .map(|m| {
                    let z = (t - m.mean) / m.sd;
                    -m.weight * z / (m.sd * m.sd) * normal_pdf(z)
                })
                .sum(),
        }
    }

    fn marginal_log_density(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, variance } => INV_SQRT_2PI.ln() - sd.ln() - 0.5 * t * t / variance,
            Kind::Mixture(c) => {
                let logs: Vec<f64> = c
                    .iter()
                    .map(|m| {
                        let z = (t - m.mean) / m.sd;
                        m.weight.ln() + INV_SQRT_2PI.ln() - m.sd.ln() - 0.5 * z * z
                    })
                    .collect();
                log_sum_exp(&logs)
            }
        }
    }

    fn marginal_score(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { variance, .. } => -t / variance,
            Kind::Mixture(c) => {
                // responsibilities in log space keep the tails finite
                let logs: Vec<f64> = c
                    .iter()
                    .map(|m| {
                        let z = (t - m.mean) / m.sd;
                        m.weight.ln() - m.sd.ln() - 0.5 * z * z
                    })
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut num = 0.0;
                let mut den = 0.0;
                for (m, l) in c.iter().zip(&logs) {
                    let r = (l - top).exp();
                    num += r * (-(t - m.mean) / (m.sd * m.sd));
                    den += r;
                }
                num / den
            }
        }
    }

    /// Marginal CDF `T`.
    pub fn cdf(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => normal_cdf(t / sd),
            Kind::Mixture(c) => c.iter().map(|m| m.weight * normal_cdf((t - m.mean) / m.sd)).sum(),
        }
    }

    /// Marginal survival function `1 − T`.
    pub fn sf(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => normal_sf(t / sd),
            Kind::Mixture(c) => c.iter().map(|m| m.weight * normal_sf((t - m.mean) / m.sd)).sum(),
        }
    }

    /// Marginal quantile `T⁻¹`.
    pub fn quantile(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => sd * normal_quantile(u),
            Kind::Mixture(_) => self.mixture_quantile(u),
        }
    }

    /// `T⁻¹(Φ(z))`, evaluated without rounding `Φ(z)` in the tails.
    pub fn quantile_at_score(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => sd * z,
            Kind::Mixture(_) => {
                if z <= 0.0 {
                    self.solve_marginal(normal_cdf(z), false)
                } else {
                    self.solve_marginal(normal_sf(z), true)
                }
            }
        }
    }

    /// `Φ⁻¹(T(t))`, the inverse of [`Self::quantile_at_score`].
    pub fn normal_score(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => t / sd,
            Kind::Mixture(_) => {
                let u = self.cdf(t);
                if u <= 0.5 {
                    normal_quantile(u)
                } else {
                    -normal_quantile(self.sf(t))
                }
            }
        }
    }

    fn mixture_quantile(&self, u: f64) -> f64 {
        if u <= 0.5 {
            self.solve_marginal(u, false)
        } else {
            self.solve_marginal(1.0 - u, true)
        }
    }

    /// Solve `cdf(t) = p` (or `sf(t) = p` when `upper`) by safeguarded Newton.
    fn solve_marginal(&self, p: f64, upper: bool) -> f64 {
        if p <= 0.0 {
            return if upper { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        let Kind::Mixture(c) = &self.kind else { unreachable!() };
        let (mut lo, mut hi) = mixture_bracket(c);
        let target = |t: f64| if upper { p - self.sf(t) } else { self.cdf(t) - p };
        while target(lo) > 0.0 {
            lo -= hi - lo;
        }
        while target(hi) < 0.0 {
            hi += hi - lo;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = target(t);
            if f == 0.0 {
                return t;
            }
            if f < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let dens = self.marginal_density(t);
            let mut next = t - f / dens;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
                return next;
            }
            t = next;
        }
        t
    }

    /// Half-width `L` of the symmetric box with `λ(box) ≥ 1 − tail/2`.
    pub fn window_half_width(&self) -> f64 {
        let per_axis = 0.5 * self.tail / D as f64;
        match &self.kind {
            Kind::Gaussian { sd, .. } => sd * -normal_quantile(0.5 * per_axis),
            Kind::Mixture(c) => {
                let (_, mut hi) = mixture_bracket(c);
                hi = hi.abs().max(1.0);
                let outside = |l: f64| self.cdf(-l) + self.sf(l);
                while outside(hi) > per_axis {
                    hi *= 1.5;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if outside(mid) > per_axis {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }

    /// Certified `sup ρ` of a coordinate marginal.
    pub fn sup_marginal_density(&self) -> f64 {
        match &self.kind {
            Kind::Gaussian { sd, .. } => INV_SQRT_2PI / sd,
            Kind::Mixture(c) => c.iter().map(|m| m.weight * INV_SQRT_2PI / m.sd).sum(),
        }
    }

    /// Certified `sup |ρ′|` of a coordinate marginal.
    pub fn sup_marginal_density_deriv(&self) -> f64 {
        // |z φ(z)| is maximal at z = 1
        let peak = normal_pdf(1.0);
        match &self.kind {
            Kind::Gaussian { sd, .. } => peak / (sd * sd),
            Kind::Mixture(c) => c.iter().map(|m| m.weight * peak / (m.sd * m.sd)).sum(),
        }
    }

    /// Certified `sup ρ_λ` and `sup |∇ρ_λ|` of the full density.
    pub fn sup_density(&self) -> f64 {
        let s = self.sup_marginal_density();
        s.powi(D as i32)
    }

    pub fn sup_grad_density(&self) -> f64 {
        // |∇ρ| ≤ sup ρ^{D-1} · sup|ρ′| · √D for a product measure
        self.sup_marginal_density().powi(D as i32 - 1) * self.sup_marginal_density_deriv() * (D as f64).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point<D> {
        let mut x = [0.0; D];
        match &self.kind {
            Kind::Gaussian { sd, .. } => {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = sd * z;
                }
            }
            Kind::Mixture(c) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = c[c.len() - 1];
                for m in c {
                    acc += m.weight;
                    if u < acc {
                        pick = *m;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                x[0] = pick.mean + pick.sd * z;
            }
        }
        x
    }
}

impl ReferenceMeasure<1> {
    /// A finite Gaussian mixture on the line; weights are renormalized.
    pub fn gauss_mixture(components: &[MixtureComponent]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter { name: "components", reason: "empty mixture".into() });
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in components {
            if !(c.weight > 0.0 && c.sd > 0.0 && c.mean.is_finite() && c.sd.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "components",
                    reason: alloc::format!("invalid component {c:?}"),
                });
            }
        }
        let comps = components
            .iter()
            .map(|c| MixtureComponent { weight: c.weight / total, ..*c })
            .collect();
        Ok(ReferenceMeasure { kind: Kind::Mixture(comps), tail: DEFAULT_TAIL })
    }
}

impl<const D: usize> DensityModel<D> for ReferenceMeasure<D> {
    fn density(&self, x: &Point<D>) -> f64 {
        x.iter().map(|&t| self.marginal_density(t)).product()
    }

    fn grad_density(&self, x: &Point<D>) -> Point<D> {
        let rho = self.density(x);
        scale(&self.score(x), rho)
    }

    fn log_density(&self, x: &Point<D>) -> f64 {
        x.iter().map(|&t| self.marginal_log_density(t)).sum()
    }

    fn score(&self, x: &Point<D>) -> Point<D> {
        let mut s = [0.0; D];
        for (o, &t) in s.iter_mut().zip(x) {
            *o = self.marginal_score(t);
        }
        s
    }
}

fn check_dim<const D: usize>() -> Result<()> {
    if D == 1 || D == 2 {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(D))
    }
}

fn mixture_bracket(c: &[MixtureComponent]) -> (f64, f64) {
    let lo = c.iter().map(|m| m.mean - 10.0 * m.sd).fold(f64::INFINITY, f64::min);
    let hi = c.iter().map(|m| m.mean + 10.0 * m.sd).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// One line of a [`ValidationReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
}

/// Pass/fail verdicts for the standing assumptions on `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Validate the default presets on their own window.
pub fn validate_reference<const D: usize>(reference: &ReferenceMeasure<D>) -> Result<ValidationReport> {
    let grid = QuadratureGrid::for_reference(reference, if D == 1 { 4096 } else { 256 })?;
    Ok(validate_density(reference, &grid, reference.tail()))
}

/// Numerical checks of positivity, Lipschitz continuity, mass and the
/// integrability conditions `λ(|x|²)`, `λ(|ln ρ|)` and
/// `∫(|ln ρ| + |∇ρ|/ρ)² dλ`. Integrability is judged finite when the value is
/// finite and stable (relative change < 10⁻³) under doubling of the window.
pub fn validate_density<const D: usize, M: DensityModel<D>>(
    model: &M,
    grid: &QuadratureGrid<D>,
    tail: f64,
) -> ValidationReport {
    let mut checks = Vec::new();

    // positivity on nodes, cell midpoints and the window centre
    let h = grid.spacing();
    let mut min_density = f64::INFINITY;
    let centre = {
        let w = grid.window();
        let mut c = [0.0; D];
        for i in 0..D {
            c[i] = 0.5 * (w.lo[i] + w.hi[i]);
        }
        c
    };
    min_density = min_density.min(model.density(&centre));
    for x in grid.nodes() {
        min_density = min_density.min(model.density(x));
        let mut mid = *x;
        for i in 0..D {
            mid[i] += 0.5 * h[i];
        }
        if grid.window().contains(&mid) {
            min_density = min_density.min(model.density(&mid));
        }
    }
    checks.push(Check { name: "positivity", passed: min_density > 0.0, value: min_density });

    // Lipschitz: difference quotients along axis 0 never exceed the sampled sup |∇ρ|
    let mut grad_sup: f64 = 0.0;
    let mut quotient: f64 = 0.0;
    for x in grid.nodes() {
        let g = model.grad_density(x);
        grad_sup = grad_sup.max(norm(&g));
        let mut next = *x;
        next[0] += h[0];
        if grid.window().contains(&next) {
            quotient = quotient.max((model.density(&next) - model.density(x)).abs() / h[0]);
        }
    }
    checks.push(Check {
        name: "lipschitz",
        passed: grad_sup.is_finite() && quotient <= grad_sup * (1.0 + 1e-3) + 1e-12,
        value: grad_sup,
    });

    let mass = grid.integrate(Weighting::Lebesgue, |x| model.density(x)).unwrap_or(f64::NAN);
    checks.push(Check {
        name: "mass",
        passed: mass >= 1.0 - tail && mass <= 1.0 + 1e-12,
        value: mass,
    });

    let wide = QuadratureGrid::new(
        {
            let w = grid.window();
            let mut lo = w.lo;
            let mut hi = w.hi;
            for i in 0..D {
                let c = 0.5 * (lo[i] + hi[i]);
                let r = hi[i] - lo[i];
                lo[i] = c - r;
                hi[i] = c + r;
            }
            Window { lo, hi }
        },
        2 * grid.per_axis() - 1,
    );
    let stable = |f: &dyn Fn(&Point<D>) -> f64| -> (bool, f64) {
        let a = grid.integrate(Weighting::Lebesgue, |x| safe_weighted(model, x, f)).unwrap_or(f64::NAN);
        let b = match &wide {
            Ok(g) => g.integrate(Weighting::Lebesgue, |x| safe_weighted(model, x, f)).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        };
        let ok = a.is_finite() && b.is_finite() && (a - b).abs() <= 1e-3 * (1.0 + a.abs());
        (ok, a)
    };
    let (ok, v) = stable(&|x: &Point<D>| x.iter().map(|t| t * t).sum());
    checks.push(Check { name: "second_moment", passed: ok, value: v });
    let (ok, v) = stable(&|x: &Point<D>| model.log_density(x).abs());
    checks.push(Check { name: "abs_log_density", passed: ok, value: v });
    let (ok, v) = stable(&|x: &Point<D>| {
        let s = model.log_density(x).abs() + norm(&model.score(x));
        s * s
    });
    checks.push(Check { name: "log_and_score_square", passed: ok, value: v });

    ValidationReport { checks }
}

// ρ(x)·f(x), taken as 0 once ρ underflows
fn safe_weighted<const D: usize, M: DensityModel<D>>(model: &M, x: &Point<D>, f: &dyn Fn(&Point<D>) -> f64) -> f64 {
    let rho = model.density(x);
    if rho < 1e-300 {
        0.0
    } else {
        rho * f(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_values() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        assert!((l.density(&[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((l.grad_density(&[1.0])[0] + 0.241_970_724_519_143_37).abs() < 1e-15);
        assert!((l.log_density(&[2.0]) - l.density(&[2.0]).ln()).abs() < 1e-14);
    }

    #[test]
    fn rejects_high_dimension() {
        assert_eq!(make_gaussian_reference::<3>(1.0), Err(Error::UnsupportedDimension(3)));
        assert!(make_gaussian_reference::<1>(-1.0).is_err());
    }

    #[test]
    fn mixture_quantile_roundtrip() {
        let m = ReferenceMeasure::gauss_mixture(&[
            MixtureComponent { weight: 0.3, mean: -1.0, sd: 0.5 },
            MixtureComponent { weight: 0.7, mean: 1.5, sd: 1.0 },
        ])
        .unwrap();
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            let t = m.quantile(u);
            assert!((m.cdf(t) - u).abs() < 1e-12);
        }
        let h = 1e-6;
        for &t in &[-2.0, -0.3, 0.7, 3.0] {
            let fd = (m.marginal_density(t + h) - m.marginal_density(t - h)) / (2.0 * h);
            assert!((fd - m.marginal_density_deriv(t)).abs() < 1e-8);
            assert!((m.score(&[t])[0] - m.marginal_density_deriv(t) / m.marginal_density(t)).abs() < 1e-12);
        }
    }

    struct ZeroAtOrigin;

    impl DensityModel<1> for ZeroAtOrigin {
        // x² φ(x) is a probability density vanishing at 0
        fn density(&self, x: &Point<1>) -> f64 {
            x[0] * x[0] * crate::special::normal_pdf(x[0])
        }
        fn grad_density(&self, x: &Point<1>) -> Point<1> {
            [(2.0 * x[0] - x[0].powi(3)) * crate::special::normal_pdf(x[0])]
        }
    }

    #[test]
    fn validation_of_presets_and_violations() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let report = validate_reference(&l).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.get("mass").unwrap().value >= 1.0 - 1e-8);
        let l2 = make_gaussian_reference::<2>(0.5).unwrap();
        assert!(validate_reference(&l2).unwrap().passed());

        let grid = QuadratureGrid::for_reference(&l, 2048).unwrap();
        let bad = validate_density(&ZeroAtOrigin, &grid, 1e-8);
        assert!(!bad.get("positivity").unwrap().passed);
    }

    #[test]
    fn gaussian_window_holds_requested_mass() {
        let l = make_gaussian_reference::<2>(2.0).unwrap();
        let w = l.window_half_width();
        let inside = (l.cdf(w) - l.cdf(-w)).powi(2);
        assert!(inside >= 1.0 - l.tail());
    }
}
