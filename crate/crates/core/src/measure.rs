//! Gaussian-based measures on diffeomorphisms and their pushforwards `λ∘φ⁻¹`.
//!
//! Coefficients are drawn independently, `c_k ~ N(0, 1/b_k)`, around the
//! identity map. Conditioning to `D₁` or `D⁽ⁿ⁾` is done by rejection against
//! the analytic certificate, so the conditioned law is exact.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assignment::solve_assignment;
use crate::basis::{weights, GaussWeights, VectorFieldBasis, WeightVariant};
use crate::diffeo::{certify_dn, checked_det, refined_bounds_1d, Diffeo, DiffeoBounds, Map};
use crate::error::{Error, Result};
use crate::linalg::{self, inverse, mat_t_vec, Point};
use crate::quadrature::QuadratureGrid;
use crate::reference::{log_sum_exp, DensityModel, ReferenceMeasure};
use crate::special::{bump_unnormalized, normal_cdf, normal_pdf, normal_quantile, normal_sf, BUMP_MASS};

pub const DEFAULT_MAX_REJECTIONS: u64 = 1_000_000;

/// Support restriction applied to the coefficient Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditioning {
    None,
    /// `κ < 1` (certified invertible)
    D1,
    /// the localized set `D⁽ⁿ⁾`
    Dn(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec<const D: usize> {
    basis: Arc<VectorFieldBasis<D>>,
    weights: GaussWeights,
    std_devs: Vec<f64>,
    pub conditioning: Conditioning,
    pub max_rejections: u64,
}

impl<const D: usize> GaussianSpec<D> {
    pub fn new(basis: Arc<VectorFieldBasis<D>>, variant: WeightVariant, conditioning: Conditioning) -> Self {
        let w = weights(&basis, variant);
        Self::with_weights(basis, w, conditioning).expect("weights built from the basis match it")
    }

    pub fn with_weights(basis: Arc<VectorFieldBasis<D>>, weights: GaussWeights, conditioning: Conditioning) -> Result<Self> {
        if weights.b.len() != basis.len() {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: format!("{} weights for {} fields", weights.b.len(), basis.len()),
            });
        }
        if weights.b.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter { name: "weights", reason: "b_k must be positive".into() });
        }
        Ok(GaussianSpec {
            std_devs: weights.std_devs(),
            basis,
            weights,
            conditioning,
            max_rejections: DEFAULT_MAX_REJECTIONS,
        })
    }

    pub fn basis(&self) -> &Arc<VectorFieldBasis<D>> {
        &self.basis
    }

    pub fn weights(&self) -> &GaussWeights {
        &self.weights
    }

    /// Truncation level.
    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn accepts(&self, phi: &Diffeo<D>) -> bool {
        match self.conditioning {
            Conditioning::None => true,
            Conditioning::D1 => phi.is_contraction(),
            Conditioning::Dn(n) => certify_dn(phi, n).member,
        }
    }

    /// `−Σ b_k c_k² / 2`.
    pub fn log_prior(&self, coeffs: &[f64]) -> f64 {
        -0.5 * coeffs.iter().zip(&self.weights.b).map(|(c, b)| b * c * c).sum::<f64>()
    }

    /// Unconditioned coefficient draw.
    pub fn draw_coefficients<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.std_devs
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect()
    }
}

/// Proposal and acceptance counts of a rejection sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub proposals: u64,
    pub accepted: u64,
}

impl SampleStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn merge(&mut self, other: &SampleStats) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
    }
}

pub fn sample<const D: usize, R: Rng + ?Sized>(spec: &GaussianSpec<D>, rng: &mut R) -> Result<Diffeo<D>> {
    sample_counted(spec, rng, &mut SampleStats::default())
}

/// Draw until the conditioning certificate passes; counts go into `stats`.
pub fn sample_counted<const D: usize, R: Rng + ?Sized>(
    spec: &GaussianSpec<D>,
    rng: &mut R,
    stats: &mut SampleStats,
) -> Result<Diffeo<D>> {
    let mut rejected = 0u64;
    loop {
        stats.proposals += 1;
        let phi = Diffeo::new(spec.basis.clone(), spec.draw_coefficients(rng))?;
        if spec.accepts(&phi) {
            stats.accepted += 1;
            return Ok(phi);
        }
        rejected += 1;
        if rejected >= spec.max_rejections {
            return Err(Error::SamplingExhausted { proposals: stats.proposals, accepted: stats.accepted });
        }
    }
}

/// `μ = λ∘φ⁻¹`.
#[derive(Debug, Clone)]
pub struct PushforwardMeasure<const D: usize, M = Diffeo<D>> {
    map: M,
    reference: ReferenceMeasure<D>,
}

pub fn pushforward<const D: usize, M: Map<D>>(reference: &ReferenceMeasure<D>, map: M) -> PushforwardMeasure<D, M> {
    PushforwardMeasure { map, reference: reference.clone() }
}

/// `y = φ(x)` with `ρ_μ(y)` and `∇ρ_μ(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushedPoint<const D: usize> {
    pub y: Point<D>,
    pub density: f64,
    pub grad: Point<D>,
    pub det: f64,
}

impl<const D: usize, M: Map<D>> PushforwardMeasure<D, M> {
    pub fn map(&self) -> &M {
        &self.map
    }

    pub fn reference(&self) -> &ReferenceMeasure<D> {
        &self.reference
    }

    /// Density and gradient at the image of a source point; no inversion.
    ///
    /// With `g = ρ_λ / J`, `∇ρ_μ(φ(x)) = ∇φ(x)^{-T} ∇g(x)` and
    /// `∇g = (∇ρ_λ − ρ_λ ∇J / J) / J`.
    pub fn at_source(&self, x: &Point<D>) -> Result<PushedPoint<D>> {
        let j = self.map.jet(x);
        let det = checked_det(&j.jac, x)?;
        let gd = linalg::grad_det(&j.jac, &j.hess);
        let rho = self.reference.density(x);
        let grho = self.reference.grad_density(x);
        let mut g = [0.0; D];
        for a in 0..D {
            g[a] = (grho[a] - rho * gd[a] / det) / det;
        }
        let inv = inverse(&j.jac).ok_or(Error::NonPositiveDeterminant { det, point: crate::error::fmt_point(x) })?;
        Ok(PushedPoint { y: j.value, density: rho / det, grad: mat_t_vec(&inv, &g), det })
    }

    pub fn density(&self, y: &Point<D>) -> Result<f64> {
        let x = self.map.invert(y)?;
        let det = checked_det(&self.map.jacobian(&x), &x)?;
        Ok(self.reference.density(&x) / det)
    }

    pub fn grad_density(&self, y: &Point<D>) -> Result<Point<D>> {
        Ok(self.at_point(y)?.grad)
    }

    pub fn at_point(&self, y: &Point<D>) -> Result<PushedPoint<D>> {
        let x = self.map.invert(y)?;
        let mut p = self.at_source(&x)?;
        p.y = *y;
        Ok(p)
    }

    /// `x = φ(X)`, `X ~ λ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point<D> {
        self.map.eval(&self.reference.sample(rng))
    }

    /// `μ(f) = ∫ f∘φ dλ` on a λ-grid.
    pub fn integrate<F: FnMut(&Point<D>) -> f64>(&self, grid: &QuadratureGrid<D>, mut f: F) -> Result<f64> {
        crate::quadrature::integrate(&self.reference, |x| f(&self.map.eval(x)), grid)
    }
}

impl<M: Map<1>> PushforwardMeasure<1, M> {
    /// Largest difference quotient of `ρ_μ` on `n` equispaced points of `[lo, hi]`.
    pub fn measured_lipschitz(&self, lo: f64, hi: f64, n: usize) -> Result<f64> {
        let h = (hi - lo) / (n - 1) as f64;
        let mut prev = self.density(&[lo])?;
        let mut best: f64 = 0.0;
        for i in 1..n {
            let cur = self.density(&[lo + i as f64 * h])?;
            best = best.max((cur - prev).abs() / h);
            prev = cur;
        }
        Ok(best)
    }
}

/// Lipschitz constant `c_n` of `ρ_μ` valid for every `φ ∈ D⁽ⁿ⁾`:
/// `n · n^d · (sup|∇ρ_λ| + d^{3/2} n² sup ρ_λ)`.
pub fn lipschitz_constant_cn<const D: usize>(reference: &ReferenceMeasure<D>, n: f64) -> f64 {
    let d = D as f64;
    n * n.powi(D as i32) * (reference.sup_grad_density() + d.powf(1.5) * n * n * reference.sup_density())
}

/// The same bound with the certified quantities of one map in place of `n`.
pub fn lipschitz_constant_for<const D: usize>(reference: &ReferenceMeasure<D>, bounds: &DiffeoBounds) -> f64 {
    let d = D as f64;
    let inv = bounds.inv_jac;
    inv * inv.powi(D as i32) * (reference.sup_grad_density() + d.powf(1.5) * inv * bounds.hess * reference.sup_density())
}

/// A 1-d law given through its quantile function.
pub trait Quantile1d {
    /// `Q(Φ(z))`; evaluating through the normal score keeps both tails accurate.
    fn quantile_at_score(&self, z: f64) -> f64;

    fn quantile(&self, u: f64) -> f64 {
        self.quantile_at_score(normal_quantile(u))
    }
}

/// `N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal1d {
    pub mean: f64,
    pub sd: f64,
}

impl Quantile1d for Normal1d {
    fn quantile_at_score(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }
}

impl Quantile1d for ReferenceMeasure<1> {
    fn quantile_at_score(&self, z: f64) -> f64 {
        ReferenceMeasure::quantile_at_score(self, z)
    }
}

/// Valid for increasing maps, which every certified 1-d map is.
impl<M: Map<1>> Quantile1d for PushforwardMeasure<1, M> {
    fn quantile_at_score(&self, z: f64) -> f64 {
        self.map.eval(&[self.reference.quantile_at_score(z)])[0]
    }
}

impl<Q: Quantile1d + ?Sized> Quantile1d for &Q {
    fn quantile_at_score(&self, z: f64) -> f64 {
        (**self).quantile_at_score(z)
    }
}

/// Piecewise-constant density on uniform cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity1d {
    lo: f64,
    dx: f64,
    /// cumulative mass at the cell edges, normalized to end at 1
    cdf: Vec<f64>,
}

impl GridDensity1d {
    pub fn new(lo: f64, dx: f64, cells: &[f64]) -> Result<Self> {
        let mut cdf = Vec::with_capacity(cells.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for (i, r) in cells.iter().enumerate() {
            if !(*r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidParameter { name: "density", reason: format!("cell {i} holds {r}") });
            }
            acc += r * dx;
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::InvalidParameter { name: "density", reason: "zero total mass".into() });
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(GridDensity1d { lo, dx, cdf })
    }

    fn invert_cdf(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u);
        if i == 0 {
            return self.lo;
        }
        if i >= self.cdf.len() {
            return self.lo + self.dx * (self.cdf.len() - 1) as f64;
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.lo + self.dx * ((i - 1) as f64 + t)
    }

    fn invert_sf(&self, s: f64) -> f64 {
        // cdf(x) = 1 − s, searched from the right to keep the small tail exact
        let n = self.cdf.len();
        let tail = |j: usize| 1.0 - self.cdf[j];
        let mut j = n - 1;
        while j > 0 && tail(j - 1) <= s {
            j -= 1;
        }
        if j == 0 {
            return self.lo;
        }
        let (s0, s1) = (tail(j - 1), tail(j));
        let t = if s0 > s1 { (s0 - s) / (s0 - s1) } else { 1.0 };
        self.lo + self.dx * ((j - 1) as f64 + t)
    }
}

impl Quantile1d for GridDensity1d {
    fn quantile_at_score(&self, z: f64) -> f64 {
        if z <= 0.0 {
            self.invert_cdf(normal_cdf(z))
        } else {
            self.invert_sf(normal_sf(z))
        }
    }
}

const W2_SCORE_RANGE: f64 = 9.0;
const W2_NODES: usize = 6001;

/// Exact 1-d `W₂` from the quantile functions:
/// `W₂² = ∫₀¹ |Q_a − Q_b|² du`, integrated in the normal-score variable.
pub fn wasserstein2_1d<A: Quantile1d + ?Sized, B: Quantile1d + ?Sized>(a: &A, b: &B) -> f64 {
    let h = 2.0 * W2_SCORE_RANGE / (W2_NODES - 1) as f64;
    let mut acc = 0.0;
    for i in 0..W2_NODES {
        let z = -W2_SCORE_RANGE + i as f64 * h;
        let w = if i == 0 || i == W2_NODES - 1 { 0.5 * h } else { h };
        let d = a.quantile_at_score(z) - b.quantile_at_score(z);
        acc += w * normal_pdf(z) * d * d;
    }
    acc.sqrt()
}

pub const MAX_ASSIGNMENT_POINTS: usize = 512;

/// Empirical `W₂` between two equal-size point clouds by exact assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalW2 {
    pub value: f64,
    pub sample_size: usize,
}

pub fn wasserstein2_empirical<const D: usize>(a: &[Point<D>], b: &[Point<D>]) -> Result<EmpiricalW2> {
    let n = a.len();
    if n != b.len() || n == 0 || n > MAX_ASSIGNMENT_POINTS {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: format!("need equal sizes in 1..={MAX_ASSIGNMENT_POINTS}, got {} and {}", n, b.len()),
        });
    }
    let mut cost = Vec::with_capacity(n * n);
    for p in a {
        for q in b {
            let d = linalg::sub(p, q);
            cost.push(linalg::dot(&d, &d));
        }
    }
    let (_, total) = solve_assignment(&cost, n);
    Ok(EmpiricalW2 { value: (total / n as f64).sqrt(), sample_size: n })
}

/// Conditioned samples with log importance weights `−W_F`.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble<const D: usize> {
    pub samples: Vec<Diffeo<D>>,
    pub log_weights: Vec<f64>,
    pub stats: SampleStats,
}

/// Self-normalized importance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ess: f64,
    pub n: usize,
}

impl<const D: usize> WeightedEnsemble<D> {
    /// Weights normalized to sum to 1.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        if self.log_weights.is_empty() {
            return Err(Error::DegenerateWeights("empty ensemble".into()));
        }
        if self.log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::DegenerateWeights("non-finite log weight".into()));
        }
        let m = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights("all weights are zero".into()));
        }
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / s).collect())
    }

    pub fn ess(&self) -> Result<f64> {
        let w = self.normalized_weights()?;
        Ok(1.0 / w.iter().map(|x| x * x).sum::<f64>())
    }

    /// `Σ wᵢ u(μᵢ) / Σ wᵢ` with the delta-method standard error.
    pub fn estimate(&self, values: &[f64]) -> Result<ImportanceEstimate> {
        let w = self.normalized_weights()?;
        if values.len() != w.len() {
            return Err(Error::InvalidParameter { name: "values", reason: "one value per sample expected".into() });
        }
        let est: f64 = w.iter().zip(values).map(|(w, u)| w * u).sum();
        let var: f64 = w.iter().zip(values).map(|(w, u)| w * w * (u - est).powi(2)).sum();
        Ok(ImportanceEstimate {
            estimate: est,
            std_error: var.sqrt(),
            ess: 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
            n: w.len(),
        })
    }

    pub fn estimate_with<F: FnMut(&Diffeo<D>) -> Result<f64>>(&self, mut u: F) -> Result<ImportanceEstimate> {
        let vals = self.samples.iter().map(&mut u).collect::<Result<Vec<f64>>>()?;
        self.estimate(&vals)
    }

    /// `ln` of the plain Monte Carlo mean of the weights.
    pub fn log_mean_weight(&self) -> f64 {
        log_sum_exp(&self.log_weights) - (self.log_weights.len() as f64).ln()
    }

    /// Multinomial resampling proportional to the weights.
    pub fn resample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Diffeo<D>>> {
        let w = self.normalized_weights()?;
        let mut cum = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        for x in &w {
            acc += x;
            cum.push(acc);
        }
        Ok((0..count)
            .map(|_| {
                let u: f64 = rng.gen::<f64>() * acc;
                let i = cum.partition_point(|&c| c < u).min(w.len() - 1);
                self.samples[i].clone()
            })
            .collect())
    }
}

/// `count` conditioned draws weighted by `e^{−W_F}`.
pub fn importance_sample<const D: usize, R, W>(
    spec: &GaussianSpec<D>,
    count: usize,
    rng: &mut R,
    mut energy: W,
) -> Result<WeightedEnsemble<D>>
where
    R: Rng + ?Sized,
    W: FnMut(&Diffeo<D>) -> Result<f64>,
{
    let mut stats = SampleStats::default();
    let mut samples = Vec::with_capacity(count);
    let mut log_weights = Vec::with_capacity(count);
    for _ in 0..count {
        let phi = sample_counted(spec, rng, &mut stats)?;
        log_weights.push(-energy(&phi)?);
        samples.push(phi);
    }
    Ok(WeightedEnsemble { samples, log_weights, stats })
}

/// `Λ_F(u) = Z_F⁻¹ ∫ u e^{−W_F} dΛ⁽ⁿ⁾` by self-normalized importance sampling.
pub fn expectation_lamf<const D: usize, R, W, U>(
    spec: &GaussianSpec<D>,
    energy: W,
    u: U,
    count: usize,
    rng: &mut R,
) -> Result<ImportanceEstimate>
where
    R: Rng + ?Sized,
    W: FnMut(&Diffeo<D>) -> Result<f64>,
    U: FnMut(&Diffeo<D>) -> Result<f64>,
{
    importance_sample(spec, count, rng, energy)?.estimate_with(u)
}

/// Options of [`approximate_target`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproximationOptions {
    /// Bump width `1/m`; `None` skips mollification.
    pub mollification: Option<f64>,
    /// `φ = (1 − 1/n) T_m + id / n`; `None` keeps `T_m`.
    pub blend: Option<f64>,
    /// Convolution nodes on the bump support.
    pub bump_nodes: usize,
}

impl Default for ApproximationOptions {
    fn default() -> Self {
        ApproximationOptions { mollification: Some(32.0), blend: None, bump_nodes: 129 }
    }
}

#[derive(Debug, Clone)]
pub struct Approximation {
    pub phi: Diffeo<1>,
    pub w2: f64,
    /// `W₂` of the unprojected (mollified, blended) transport map
    pub w2_transport: f64,
    pub bounds: DiffeoBounds,
}

/// Best approximation of the monotone transport `T = Q_target ∘ T_λ` in
/// `id + span(basis)`, after mollification and blending.
pub fn approximate_target<Q: Quantile1d + ?Sized>(
    target: &Q,
    basis: Arc<VectorFieldBasis<1>>,
    options: &ApproximationOptions,
) -> Result<Approximation> {
    let reference = basis.reference().clone();
    let transport = |x: f64| target.quantile_at_score(reference.normal_score(x));
    let mollified = |x: f64| match options.mollification {
        None => transport(x),
        Some(m) => {
            let q = options.bump_nodes.max(3);
            let h = 2.0 / (q - 1) as f64;
            let mut acc = 0.0;
            for i in 1..q - 1 {
                let w = -1.0 + i as f64 * h;
                acc += bump_unnormalized(w) * transport(x - w / m);
            }
            acc * h / BUMP_MASS
        }
    };
    let shaped = |x: f64| match options.blend {
        None => mollified(x),
        Some(n) => (1.0 - 1.0 / n) * mollified(x) + x / n,
    };
    let grid = QuadratureGrid::default_for(&reference)?;
    let k = basis.len();
    let mut coeffs = alloc::vec![0.0; k];
    let mut jets = alloc::vec![crate::basis::Jet::zero(); k];
    for (x, w) in grid.nodes().iter().zip(grid.weights()) {
        let wr = w * reference.density(x);
        let psi = shaped(x[0]) - x[0];
        basis.eval_all(x, &mut jets);
        for (c, j) in coeffs.iter_mut().zip(&jets) {
            *c += wr * psi * j.value[0];
        }
    }
    let phi = Diffeo::new(basis, coeffs)?;
    let bounds = refined_bounds_1d(&phi, &grid, None);
    if !bounds.inv_jac.is_finite() {
        let min_slope = grid.nodes().iter().map(|x| phi.jacobian(x)[0][0]).fold(f64::INFINITY, f64::min);
        return Err(Error::Certification(format!(
            "projected map is not certified monotone: kappa = {:.4}, min slope on grid = {:.4}",
            phi.kappa(),
            min_slope
        )));
    }
    let w2 = wasserstein2_1d(&pushforward(&reference, &phi), target);
    let w2_transport = wasserstein2_1d(&ClosureQuantile(|z: f64| shaped(reference.quantile_at_score(z))), target);
    Ok(Approximation { phi, w2, w2_transport, bounds })
}

/// A quantile function given by a closure of the normal score.
pub struct ClosureQuantile<F>(pub F);

impl<F: Fn(f64) -> f64> Quantile1d for ClosureQuantile<F> {
    fn quantile_at_score(&self, z: f64) -> f64 {
        (self.0)(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_warped_trig_basis;
    use crate::diffeo::AffineMap;
    use crate::reference::make_gaussian_reference;
    use crate::stats::ks_statistic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec1(k: usize, cond: Conditioning) -> GaussianSpec<1> {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        GaussianSpec::new(Arc::new(build_warped_trig_basis(&l, k).unwrap()), WeightVariant::GradientAndHessian, cond)
    }

    #[test]
    fn empty_basis_gives_identity() {
        let s = spec1(0, Conditioning::Dn(4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = sample(&s, &mut rng).unwrap();
        assert_eq!(phi.eval(&[1.25]), [1.25]);
    }

    #[test]
    fn acceptance_rate_and_determinism() {
        let s = spec1(8, Conditioning::Dn(4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut stats = SampleStats::default();
        for _ in 0..2000 {
            let phi = sample_counted(&s, &mut rng, &mut stats).unwrap();
            assert!(certify_dn(&phi, 4.0).member);
        }
        assert!(stats.acceptance_rate() > 0.0);
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            assert_eq!(sample(&s, &mut a).unwrap().coeffs(), sample(&s, &mut b).unwrap().coeffs());
        }
    }

    #[test]
    fn exhausted_sampler_reports_counts() {
        let mut s = spec1(8, Conditioning::Dn(2.0));
        s.max_rejections = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match sample(&s, &mut rng) {
            Err(Error::SamplingExhausted { proposals, accepted }) => assert_eq!((proposals, accepted), (10, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn affine_pushforward_density() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let mu = pushforward(&l, AffineMap::<1>::scaling(2.0));
        for x in [-3.0, -0.4, 0.0, 1.1, 5.0] {
            let expect = l.marginal_density(x / 2.0) / 2.0;
            assert!((mu.density(&[x]).unwrap() - expect).abs() < 1e-16);
            let g = mu.grad_density(&[x]).unwrap()[0];
            assert!((g - l.marginal_density_deriv(x / 2.0) / 4.0).abs() < 1e-16);
        }
        let id = pushforward(&l, AffineMap::<1>::scaling(1.0));
        assert_eq!(id.density(&[0.3]).unwrap(), l.marginal_density(0.3));
    }

    #[test]
    fn density_gradient_matches_differences() {
        let s = spec1(8, Conditioning::Dn(4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mu = pushforward(s.basis().reference(), sample(&s, &mut rng).unwrap());
            for i in 0..100 {
                let y = -4.0 + 0.08 * i as f64;
                let h = 1e-5;
                let fd = (mu.density(&[y + h]).unwrap() - mu.density(&[y - h]).unwrap()) / (2.0 * h);
                let g = mu.grad_density(&[y]).unwrap()[0];
                assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn wasserstein_gaussian_cases() {
        let a = Normal1d { mean: 0.0, sd: 1.0 };
        assert_eq!(wasserstein2_1d(&a, &a), 0.0);
        let b = Normal1d { mean: 0.7, sd: 1.0 };
        assert!((wasserstein2_1d(&a, &b) - 0.7).abs() < 1e-12);
        let c = Normal1d { mean: 0.0, sd: 2.5 };
        assert!((wasserstein2_1d(&a, &c) - 1.5).abs() < 1e-10);
        // cross-check by quantile quadrature on a uniform u-grid
        let n = 200_000;
        let s: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                (a.quantile(u) - c.quantile(u)).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        assert!((s.sqrt() - 1.5).abs() < 1e-3);
    }

    #[test]
    fn empirical_wasserstein_of_shift() {
        let a: Vec<Point<2>> = (0..64).map(|i| [i as f64 * 0.1, (i % 7) as f64]).collect();
        let b: Vec<Point<2>> = a.iter().map(|p| [p[0] + 0.3, p[1] - 0.4]).collect();
        let w = wasserstein2_empirical(&a, &b).unwrap();
        assert!((w.value - 0.5).abs() < 1e-12);
        assert!(wasserstein2_empirical(&a, &b[..10]).is_err());
    }

    #[test]
    fn sampler_matches_density_cdf() {
        let s = spec1(8, Conditioning::Dn(4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = sample(&s, &mut rng).unwrap();
        let mu = pushforward(s.basis().reference(), phi);
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|_| mu.sample(&mut rng)[0]).collect();
        // quadrature CDF of ρ_μ on a fine y-grid
        let (lo, hi, m) = (-9.0, 9.0, 9001);
        let h = (hi - lo) / (m - 1) as f64;
        let dens: Vec<f64> = (0..m).map(|i| mu.density(&[lo + i as f64 * h]).unwrap()).collect();
        let mut cdf = alloc::vec![0.0; m];
        for i in 1..m {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
        }
        let at = |y: f64| {
            let t = ((y - lo) / h).clamp(0.0, (m - 1) as f64);
            let i = (t.floor() as usize).min(m - 2);
            cdf[i] + (t - i as f64) * (cdf[i + 1] - cdf[i])
        };
        assert!(ks_statistic(&xs, at) <= 1.63 / (n as f64).sqrt());
    }

    #[test]
    fn importance_estimates() {
        let s = spec1(4, Conditioning::Dn(4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = expectation_lamf(&s, |_| Ok(0.3), |_| Ok(1.0), 100, &mut rng).unwrap();
        assert!((e.estimate - 1.0).abs() < 1e-14);
        let ens = importance_sample(&s, 50, &mut rng, |_| Ok(f64::INFINITY)).unwrap();
        assert!(matches!(ens.normalized_weights(), Err(Error::DegenerateWeights(_))));
    }

    #[test]
    fn target_approximation() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let b16 = Arc::new(VectorFieldBasis::warped_trig(&l, 16, true).unwrap());
        let opts = ApproximationOptions::default();
        let same = approximate_target(&l, b16.clone(), &opts).unwrap();
        assert!(same.w2 <= 1e-6, "{}", same.w2);
        let shift = approximate_target(&Normal1d { mean: 0.5, sd: 1.0 }, b16, &opts).unwrap();
        assert!(shift.w2 <= 1e-2, "{}", shift.w2);
    }
}
