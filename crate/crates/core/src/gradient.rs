//! Intrinsic derivatives: finite differences along pushforward curves, the
//! closed-form gradient `H_F`, its mollified counterpart, cylinder test
//! functions and the square-field operator.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::basis::{Jet, VectorFieldBasis};
use crate::diffeo::{compose, Map};
use crate::energy::{w_pushforward, EnergyIntegrand, Mobility, S_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{dot, mat_vec, op_norm, Matrix, Point};
use crate::measure::PushforwardMeasure;
use crate::quadrature::QuadratureGrid;
use crate::reference::{DensityModel, ReferenceMeasure};
use crate::special::{bump_unnormalized, bump_unnormalized_deriv};

/// A pushforward `μ = λ∘φ⁻¹` discretized on the image of a λ-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureNodes<const D: usize> {
    /// `φ(x_i)`
    pub points: Vec<Point<D>>,
    /// `w_i ρ_λ(x_i)`, so that `μ(f) ≈ Σ weights_i f(points_i)`
    pub weights: Vec<f64>,
    pub density: Vec<f64>,
    pub grad_density: Vec<Point<D>>,
}

impl<const D: usize> MeasureNodes<D> {
    pub fn new<M: Map<D>>(mu: &PushforwardMeasure<D, M>, grid: &QuadratureGrid<D>) -> Result<Self> {
        let n = grid.len();
        let mut out = MeasureNodes {
            points: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            density: Vec::with_capacity(n),
            grad_density: Vec::with_capacity(n),
        };
        for (x, w) in grid.nodes().iter().zip(grid.weights()) {
            let p = mu.at_source(x)?;
            out.points.push(p.y);
            out.weights.push(w * mu.reference().density(x));
            out.density.push(p.density);
            out.grad_density.push(p.grad);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate<F: FnMut(usize, &Point<D>) -> f64>(&self, mut f: F) -> f64 {
        self.points.iter().zip(&self.weights).enumerate().map(|(i, (y, w))| w * f(i, y)).sum()
    }
}

/// Inner functions `h : ℝ^D → ℝ` of cylinder functions.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction<const D: usize> {
    Constant(f64),
    /// `x_axis^power`
    Moment { axis: usize, power: u32 },
    /// `tanh(x_axis / scale)`
    Tanh { axis: usize, scale: f64 },
    /// `sin(frequency · x_axis)`
    Sin { axis: usize, frequency: f64 },
    /// `exp(−|x − center|² / (2 width²))`
    Gaussian { center: Point<D>, width: f64 },
}

impl<const D: usize> TestFunction<D> {
    pub fn value(&self, x: &Point<D>) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Moment { axis, power } => x[*axis].powi(*power as i32),
            TestFunction::Tanh { axis, scale } => (x[*axis] / scale).tanh(),
            TestFunction::Sin { axis, frequency } => (frequency * x[*axis]).sin(),
            TestFunction::Gaussian { center, width } => {
                let r2: f64 = (0..D).map(|a| (x[a] - center[a]).powi(2)).sum();
                (-0.5 * r2 / (width * width)).exp()
            }
        }
    }

    pub fn grad(&self, x: &Point<D>) -> Point<D> {
        let mut g = [0.0; D];
        match self {
            TestFunction::Constant(_) => {}
            TestFunction::Moment { axis, power } => {
                if *power > 0 {
                    g[*axis] = *power as f64 * x[*axis].powi(*power as i32 - 1);
                }
            }
            TestFunction::Tanh { axis, scale } => {
                let t = (x[*axis] / scale).tanh();
                g[*axis] = (1.0 - t * t) / scale;
            }
            TestFunction::Sin { axis, frequency } => g[*axis] = frequency * (frequency * x[*axis]).cos(),
            TestFunction::Gaussian { width, center } => {
                let v = self.value(x);
                for a in 0..D {
                    g[a] = -v * (x[a] - center[a]) / (width * width);
                }
            }
        }
        g
    }
}

/// Outer functions `g : ℝ^m → ℝ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Outer {
    Constant(f64),
    /// `Σ wᵢ zᵢ`
    Linear(Vec<f64>),
    /// `z₀²`
    Square,
    /// `sin z₀`
    Sin,
    /// `left(z[..split]) · right(z[split..])`
    Product { left: Box<Outer>, split: usize, right: Box<Outer> },
}

impl Outer {
    /// Number of arguments read, or `None` when any count works.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Outer::Constant(_) => None,
            Outer::Linear(w) => Some(w.len()),
            Outer::Square | Outer::Sin => Some(1),
            Outer::Product { .. } => None,
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            Outer::Constant(c) => *c,
            Outer::Linear(w) => w.iter().zip(z).map(|(a, b)| a * b).sum(),
            Outer::Square => z[0] * z[0],
            Outer::Sin => z[0].sin(),
            Outer::Product { left, split, right } => left.value(&z[..*split]) * right.value(&z[*split..]),
        }
    }

    /// Writes `∇g(z)` into `out` (same length as `z`).
    pub fn grad(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            Outer::Constant(_) => {}
            Outer::Linear(w) => out[..w.len()].copy_from_slice(w),
            Outer::Square => out[0] = 2.0 * z[0],
            Outer::Sin => out[0] = z[0].cos(),
            Outer::Product { left, split, right } => {
                let (zl, zr) = z.split_at(*split);
                let (ol, or) = out.split_at_mut(*split);
                left.grad(zl, ol);
                right.grad(zr, or);
                let (vl, vr) = (left.value(zl), right.value(zr));
                ol.iter_mut().for_each(|v| *v *= vr);
                or.iter_mut().for_each(|v| *v *= vl);
            }
        }
    }
}

/// `u(μ) = g(μ(h₁), …, μ(h_m))` with `Du(μ) = Σᵢ ∂ᵢg ∇hᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderFunction<const D: usize> {
    outer: Outer,
    inner: Vec<TestFunction<D>>,
}

impl<const D: usize> CylinderFunction<D> {
    pub fn new(outer: Outer, inner: Vec<TestFunction<D>>) -> Result<Self> {
        if let Some(m) = outer.arity() {
            if m != inner.len() {
                return Err(Error::InvalidParameter {
                    name: "cylinder",
                    reason: format!("outer function takes {m} arguments, {} inner functions given", inner.len()),
                });
            }
        }
        if let Outer::Product { split, .. } = &outer {
            if *split > inner.len() {
                return Err(Error::InvalidParameter { name: "cylinder", reason: "product split out of range".into() });
            }
        }
        Ok(CylinderFunction { outer, inner })
    }

    /// `u(μ) = μ(h)`.
    pub fn linear(h: TestFunction<D>) -> Self {
        CylinderFunction { outer: Outer::Linear(vec![1.0]), inner: vec![h] }
    }

    pub fn constant(c: f64) -> Self {
        CylinderFunction { outer: Outer::Constant(c), inner: Vec::new() }
    }

    /// `(u·v)(μ) = u(μ) v(μ)`.
    pub fn product(&self, other: &Self) -> Self {
        let mut inner = self.inner.clone();
        inner.extend(other.inner.iter().cloned());
        CylinderFunction {
            outer: Outer::Product { left: Box::new(self.outer.clone()), split: self.inner.len(), right: Box::new(other.outer.clone()) },
            inner,
        }
    }

    pub fn inner(&self) -> &[TestFunction<D>] {
        &self.inner
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.outer, Outer::Constant(_)) || self.inner.iter().all(|h| matches!(h, TestFunction::Constant(_)))
    }

    /// `(μ(h₁), …, μ(h_m))`.
    pub fn inner_values(&self, mu: &MeasureNodes<D>) -> Vec<f64> {
        self.inner.iter().map(|h| mu.integrate(|_, y| h.value(y))).collect()
    }

    pub fn value_at(&self, z: &[f64]) -> f64 {
        self.outer.value(z)
    }

    pub fn eval(&self, mu: &MeasureNodes<D>) -> f64 {
        self.value_at(&self.inner_values(mu))
    }

    /// `∇g` at the inner values `z`.
    pub fn outer_grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        self.outer.grad(z, &mut g);
        g
    }

    /// `Du(μ)(y) = Σᵢ ∂ᵢg(z) ∇hᵢ(y)`.
    pub fn derivative_at(&self, outer_grad: &[f64], y: &Point<D>) -> Point<D> {
        let mut out = [0.0; D];
        for (h, &gi) in self.inner.iter().zip(outer_grad) {
            if gi != 0.0 {
                let gh = h.grad(y);
                for a in 0..D {
                    out[a] += gi * gh[a];
                }
            }
        }
        out
    }

    pub fn derivative(&self, mu: &MeasureNodes<D>) -> Vec<Point<D>> {
        let g = self.outer_grad(&self.inner_values(mu));
        mu.points.iter().map(|y| self.derivative_at(&g, y)).collect()
    }
}

/// Shapes of the weight `γ(x, μ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaKind {
    Unit,
    Constant(f64),
    /// `b(ρ_μ(x))`
    Mobility(Mobility),
    /// `base + amplitude · tanh(x₀ / scale)`
    Tanh { base: f64, amplitude: f64, scale: f64 },
}

/// `γ` clamped into `[c⁻¹, c]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaWeight {
    pub kind: GammaKind,
    pub bound: f64,
}

impl GammaWeight {
    pub fn unit() -> Self {
        GammaWeight { kind: GammaKind::Unit, bound: 1.0 }
    }

    pub fn new(kind: GammaKind, bound: f64) -> Result<Self> {
        if !(bound >= 1.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter { name: "gamma.bound", reason: format!("need 1 ≤ c < ∞, got {bound}") });
        }
        Ok(GammaWeight { kind, bound })
    }

    pub fn is_unit(&self) -> bool {
        matches!(self.kind, GammaKind::Unit)
    }

    /// `(γ(x, μ), clamped)` given `ρ_μ(x)`.
    pub fn value<const D: usize>(&self, x: &Point<D>, rho: f64) -> (f64, bool) {
        let raw = match self.kind {
            GammaKind::Unit => return (1.0, false),
            GammaKind::Constant(c) => c,
            GammaKind::Mobility(b) => b.value(rho),
            GammaKind::Tanh { base, amplitude, scale } => base + amplitude * (x[0] / scale).tanh(),
        };
        let lo = 1.0 / self.bound;
        if raw < lo {
            (lo, true)
        } else if raw > self.bound {
            (self.bound, true)
        } else {
            (raw, false)
        }
    }
}

/// How a [`GradientField`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ClosedForm,
    Mollified(u32),
    FiniteDifference,
}

/// A vector field on the nodes of a [`MeasureNodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField<const D: usize> {
    pub provenance: Provenance,
    pub values: Vec<Point<D>>,
    /// nodes skipped because `ρ_μ` fell below the density floor
    pub floored: usize,
}

impl<const D: usize> GradientField<D> {
    /// `(∫ |v|² dμ)^{1/2}`.
    pub fn l2_norm(&self, mu: &MeasureNodes<D>) -> f64 {
        mu.integrate(|i, _| dot(&self.values[i], &self.values[i])).sqrt()
    }

    pub fn l2_distance(&self, other: &GradientField<D>, mu: &MeasureNodes<D>) -> f64 {
        mu.integrate(|i, _| {
            let d = crate::linalg::sub(&self.values[i], &other.values[i]);
            dot(&d, &d)
        })
        .sqrt()
    }

    /// `μ(⟨v, dir⟩)`.
    pub fn pairing<F: Fn(&Point<D>) -> Point<D>>(&self, mu: &MeasureNodes<D>, dir: F) -> f64 {
        mu.integrate(|i, y| dot(&self.values[i], &dir(y)))
    }
}

/// `H_F(y) = ∇₁∂₂F(y, ρ_μ(y)) + ∂₂∂₂F(y, ρ_μ(y)) ∇ρ_μ(y)` on the nodes of `mu`.
pub fn h_f<const D: usize>(f: &EnergyIntegrand, mu: &MeasureNodes<D>) -> GradientField<D> {
    let mut floored = 0;
    let values = (0..mu.len())
        .map(|i| {
            let rho = mu.density[i];
            if rho < S_FLOOR {
                floored += 1;
                return [0.0; D];
            }
            f.gradient_at(&mu.points[i], rho, &mu.grad_density[i])
        })
        .collect();
    GradientField { provenance: Provenance::ClosedForm, values, floored }
}

const KERNEL_HALF_NODES: usize = 64;

/// The mollified gradient `Du_m` of a 1-d density `rho` at `points`:
/// `Du_m(x) = ∫ [∇₁∂₂F(y, ρ_m) + ∂₂∂₂F(y, ρ_m) ∇ρ_m](y) τ_m(y − x) dy`,
/// `ρ_m = τ_m * ρ`, all convolutions by quadrature on a uniform grid over
/// `[lo, hi]` padded by the kernel support.
pub fn mollified_gradient_density<R: Fn(f64) -> Result<f64>>(
    f: &EnergyIntegrand,
    rho: R,
    lo: f64,
    hi: f64,
    m: u32,
    points: &[f64],
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter { name: "m", reason: "mollification level must be at least 1".into() });
    }
    let r = 1.0 / m as f64;
    let h = r / KERNEL_HALF_NODES as f64;
    let start = lo - 2.0 * r;
    let n = ((hi - lo + 4.0 * r) / h).ceil() as usize + 1;
    let dens = (0..n).map(|j| rho(start + j as f64 * h)).collect::<Result<Vec<f64>>>()?;
    // τ_m(t) = m τ(m t) on the lattice offsets; both kernels in units of dy
    let kk = KERNEL_HALF_NODES as isize;
    let mut kern = Vec::with_capacity(2 * KERNEL_HALF_NODES + 1);
    let mut dkern = Vec::with_capacity(2 * KERNEL_HALF_NODES + 1);
    for o in -kk..=kk {
        let t = o as f64 / kk as f64;
        kern.push(bump_unnormalized(t));
        dkern.push(bump_unnormalized_deriv(t) / r);
    }
    let mass: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= mass);
    dkern.iter_mut().for_each(|v| *v /= mass);
    // integrand I(y) on the inner lattice, where the kernel fits
    let inner: Vec<(f64, f64)> = (KERNEL_HALF_NODES..n.saturating_sub(KERNEL_HALF_NODES))
        .map(|j| {
            let y = start + j as f64 * h;
            let mut rm = 0.0;
            let mut grm = 0.0;
            for (o, (k, dk)) in kern.iter().zip(&dkern).enumerate() {
                let d = dens[j + o - KERNEL_HALF_NODES];
                rm += k * d;
                // ∇(τ_m * ρ)(y) = ∫ ρ(w) ∂_y τ_m(y − w) dw, with w = y + offset
                grm -= dk * d;
            }
            let v = if rm < S_FLOOR { 0.0 } else { f.gradient_at(&[y], rm, &[grm])[0] };
            (y, v)
        })
        .collect();
    let first = inner.first().map_or(0.0, |p| p.0);
    let out = points
        .iter()
        .map(|&x| {
            let j0 = ((x - r - first) / h).floor().max(0.0) as usize;
            let j1 = (((x + r - first) / h).ceil() as usize + 1).min(inner.len());
            let (mut acc, mut mass) = (0.0, 0.0);
            for &(y, v) in &inner[j0.min(j1)..j1] {
                let k = bump_unnormalized((y - x) / r);
                acc += k * v;
                mass += k;
            }
            if mass > 0.0 {
                acc / mass
            } else {
                0.0
            }
        })
        .collect();
    Ok(out)
}

/// [`mollified_gradient_density`] for a 1-d pushforward, evaluated on the
/// nodes of `nodes` over the window `[φ(−L), φ(L)]`.
pub fn mollified_gradient<M: Map<1>>(
    f: &EnergyIntegrand,
    mu: &PushforwardMeasure<1, M>,
    m: u32,
    nodes: &MeasureNodes<1>,
) -> Result<GradientField<1>> {
    let l = mu.reference().window_half_width();
    let lo = mu.map().eval(&[-l])[0];
    let hi = mu.map().eval(&[l])[0];
    let xs: Vec<f64> = nodes.points.iter().map(|p| p[0]).collect();
    let vals = mollified_gradient_density(f, |y| mu.density(&[y]), lo, hi, m, &xs)?;
    Ok(GradientField { provenance: Provenance::Mollified(m), values: vals.into_iter().map(|v| [v]).collect(), floored: 0 })
}

/// `Γ(u, v)(μ) = μ(γ ⟨Du(μ), Dv(μ)⟩)` and the number of clamped γ values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareField {
    pub value: f64,
    pub clamped: usize,
}

pub fn square_field<const D: usize>(
    u: &CylinderFunction<D>,
    v: &CylinderFunction<D>,
    mu: &MeasureNodes<D>,
    gamma: &GammaWeight,
) -> SquareField {
    let du = u.derivative(mu);
    let dv = v.derivative(mu);
    let mut clamped = 0;
    let value = mu.integrate(|i, y| {
        let (g, c) = gamma.value(y, mu.density[i]);
        clamped += c as usize;
        g * dot(&du[i], &dv[i])
    });
    SquareField { value, clamped }
}

/// A direction field for [`diff_fd`].
#[derive(Debug, Clone, PartialEq)]
pub enum Direction<const D: usize> {
    /// `Σ a_k φ_k`, bounded with bounded derivatives
    Span { basis: Arc<VectorFieldBasis<D>>, coeffs: Vec<f64> },
    /// `x ↦ A x`, unbounded
    Linear(Matrix<D>),
}

impl<const D: usize> Direction<D> {
    pub fn jet(&self, x: &Point<D>) -> Jet<D> {
        match self {
            Direction::Span { basis, coeffs } => basis.combine(coeffs, x),
            Direction::Linear(a) => {
                let mut j = Jet::zero();
                j.value = mat_vec(a, x);
                j.jac = *a;
                j
            }
        }
    }

    pub fn value(&self, x: &Point<D>) -> Point<D> {
        match self {
            Direction::Span { basis, coeffs } => basis.combine_value(coeffs, x),
            Direction::Linear(a) => mat_vec(a, x),
        }
    }

    /// `≥ ‖∇dir‖_∞`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Direction::Span { basis, coeffs } => coeffs.iter().zip(basis.bounds()).map(|(c, b)| c.abs() * b.lip).sum(),
            Direction::Linear(a) => op_norm(a),
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, Direction::Span { .. })
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            Direction::Span { basis, coeffs } => Direction::Span { basis: basis.clone(), coeffs: coeffs.iter().map(|c| c * s).collect() },
            Direction::Linear(a) => {
                let mut b = *a;
                b.iter_mut().flatten().for_each(|v| *v *= s);
                Direction::Linear(b)
            }
        }
    }

    /// `‖dir‖_{L²(λ)}`.
    pub fn l2_norm(&self, reference: &ReferenceMeasure<D>, grid: &QuadratureGrid<D>) -> f64 {
        grid.nodes()
            .iter()
            .zip(grid.weights())
            .map(|(x, w)| {
                let v = self.value(x);
                w * reference.density(x) * dot(&v, &v)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// `x ↦ x + ε dir(x)`.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation<'a, const D: usize> {
    pub dir: &'a Direction<D>,
    pub eps: f64,
}

impl<const D: usize> Map<D> for Perturbation<'_, D> {
    fn jet(&self, x: &Point<D>) -> Jet<D> {
        let mut j = self.dir.jet(x);
        for i in 0..D {
            j.value[i] = x[i] + self.eps * j.value[i];
            for a in 0..D {
                j.jac[i][a] *= self.eps;
                for b in 0..D {
                    j.hess[i][a][b] *= self.eps;
                }
            }
            j.jac[i][i] += 1.0;
        }
        j
    }
}

/// A functional of `μ = λ∘ψ⁻¹`, evaluated through the map `ψ`.
pub trait Functional<const D: usize> {
    fn value<M: Map<D>>(&self, reference: &ReferenceMeasure<D>, map: &M) -> Result<f64>;
}

/// `μ ↦ c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantFunctional(pub f64);

impl<const D: usize> Functional<D> for ConstantFunctional {
    fn value<M: Map<D>>(&self, _: &ReferenceMeasure<D>, _: &M) -> Result<f64> {
        Ok(self.0)
    }
}

/// `μ ↦ W_F(μ)` by the change-of-variables quadrature on `grid`.
#[derive(Debug, Clone, Copy)]
pub struct EnergyFunctional<'a, const D: usize> {
    pub integrand: &'a EnergyIntegrand,
    pub grid: &'a QuadratureGrid<D>,
}

impl<const D: usize> Functional<D> for EnergyFunctional<'_, D> {
    fn value<M: Map<D>>(&self, reference: &ReferenceMeasure<D>, map: &M) -> Result<f64> {
        w_pushforward(self.integrand, reference, map, self.grid)
    }
}

/// Options of [`diff_fd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    /// combine steps `ε` and `ε/2` as `(4 D(ε/2) − D(ε)) / 3`
    pub richardson: bool,
    /// permit directions outside `C_b¹`, such as `dir(x) = x`
    pub unbounded_probe: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { eps: 1e-4, richardson: true, unbounded_probe: false }
    }
}

/// `(W(μ_{+ε}) − W(μ_{−ε})) / (2ε)` with `μ_{±ε} = λ∘((id ± ε dir)∘φ)⁻¹`.
pub fn diff_fd<const D: usize, M: Map<D>, W: Functional<D>>(
    w: &W,
    mu: &PushforwardMeasure<D, M>,
    dir: &Direction<D>,
    opts: &FdOptions,
) -> Result<f64> {
    if !dir.is_bounded() && !opts.unbounded_probe {
        return Err(Error::InvalidParameter {
            name: "direction",
            reason: "unbounded direction requires the unbounded-probe flag".into(),
        });
    }
    let eps = opts.eps.abs();
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::StepSize { eps, reason: "step must be positive and finite".into() });
    }
    let margin = 1.0 - mu.map().contraction().unwrap_or(0.0).min(1.0);
    let lip = dir.lipschitz();
    let margin = if margin > 0.0 { margin } else { 1.0 };
    if eps * lip >= margin {
        return Err(Error::StepSize {
            eps,
            reason: format!("id ± ε·dir not certified (ε·Lip = {:.3e} ≥ {:.3e}); try ε < {:.3e}", eps * lip, margin, margin / lip),
        });
    }
    let central = |e: f64| -> Result<f64> {
        let plus = compose(Perturbation { dir, eps: e }, mu.map());
        let minus = compose(Perturbation { dir, eps: -e }, mu.map());
        Ok((w.value(mu.reference(), &plus)? - w.value(mu.reference(), &minus)?) / (2.0 * e))
    };
    let d1 = central(eps)?;
    if !opts.richardson {
        return Ok(d1);
    }
    let d2 = central(0.5 * eps)?;
    Ok((4.0 * d2 - d1) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_warped_trig_basis;
    use crate::diffeo::{AffineMap, Diffeo};
    use crate::energy::{Beta, PorousMedia, Potential};
    use crate::measure::pushforward;
    use crate::reference::make_gaussian_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn std_normal() -> ReferenceMeasure<1> {
        make_gaussian_reference::<1>(1.0).unwrap()
    }

    #[test]
    fn entropy_gradient_at_gaussian() {
        let l = std_normal();
        let grid = QuadratureGrid::default_for(&l).unwrap();
        let mu = pushforward(&l, AffineMap::<1>::scaling(1.0));
        let nodes = MeasureNodes::new(&mu, &grid).unwrap();
        let h = h_f(&EnergyIntegrand::entropy(), &nodes);
        for (y, v) in nodes.points.iter().zip(&h.values) {
            assert!((v[0] + y[0]).abs() < 1e-9 * (1.0 + y[0].abs()));
        }
        let w = EnergyFunctional { integrand: &EnergyIntegrand::entropy(), grid: &grid };
        let opts = FdOptions { unbounded_probe: true, ..FdOptions::default() };
        let d = diff_fd(&w, &mu, &Direction::Linear([[1.0]]), &opts).unwrap();
        assert!((d + 1.0).abs() < 1e-4, "{d}");
        assert!(diff_fd(&w, &mu, &Direction::Linear([[1.0]]), &FdOptions::default()).is_err());
        assert_eq!(diff_fd(&ConstantFunctional(3.0), &mu, &Direction::Linear([[1.0]]), &opts).unwrap(), 0.0);
    }

    #[test]
    fn porous_heat_gradient() {
        let l = std_normal();
        let grid = QuadratureGrid::default_for(&l).unwrap();
        let phi = Potential { offset: 0.0, quadratic: 0.0, soft_abs: 0.7 };
        let pm = PorousMedia { phi, ..PorousMedia::heat() };
        let f = EnergyIntegrand::porous_media(pm).unwrap();
        let basis = Arc::new(build_warped_trig_basis(&l, 4).unwrap());
        let mu = pushforward(&l, Diffeo::new(basis, vec![0.05, -0.03, 0.02, 0.0]).unwrap());
        let nodes = MeasureNodes::new(&mu, &grid).unwrap();
        let h = h_f(&f, &nodes);
        for i in (0..nodes.len()).step_by(97) {
            let want = phi.grad(&nodes.points[i])[0] + nodes.grad_density[i][0] / nodes.density[i];
            assert!((h.values[i][0] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn pairing_matches_finite_differences() {
        let l = std_normal();
        let grid = QuadratureGrid::default_for(&l).unwrap();
        let basis = Arc::new(build_warped_trig_basis(&l, 8).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let presets = [
            EnergyIntegrand::entropy(),
            EnergyIntegrand::porous_media(PorousMedia {
                phi: Potential { offset: 0.0, quadratic: 0.0, soft_abs: 0.5 },
                beta: Beta::Saturating { alpha: 1.0, delta: 0.5, r0: 0.3 },
                mobility: Mobility::Saturating { b0: 1.0, b1: 0.5, r0: 1.0 },
            })
            .unwrap(),
        ];
        for f in &presets {
            for _ in 0..5 {
                let c: Vec<f64> = (0..8).map(|k| rng.gen_range(-0.04..0.04) / (k + 1) as f64).collect();
                let mu = pushforward(&l, Diffeo::new(basis.clone(), c).unwrap());
                let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dir = Direction::Span { basis: basis.clone(), coeffs: a };
                let nodes = MeasureNodes::new(&mu, &grid).unwrap();
                let pairing = h_f(f, &nodes).pairing(&nodes, |y| dir.value(y));
                let w = EnergyFunctional { integrand: f, grid: &grid };
                let fd = diff_fd(&w, &mu, &dir, &FdOptions::default()).unwrap();
                assert!((fd - pairing).abs() <= 1e-3 * (1.0 + pairing.abs()), "{fd} vs {pairing}");
                let fd2 = diff_fd(&w, &mu, &dir.scaled(2.0), &FdOptions::default()).unwrap();
                assert!((fd2 - 2.0 * fd).abs() <= 1e-6 * fd.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn step_too_large_is_rejected() {
        let l = std_normal();
        let grid = QuadratureGrid::default_for(&l).unwrap();
        let basis = Arc::new(build_warped_trig_basis(&l, 2).unwrap());
        let mu = pushforward(&l, Diffeo::identity(basis.clone()));
        let dir = Direction::Span { basis, coeffs: vec![1.0, 0.0] };
        let w = EnergyFunctional { integrand: &EnergyIntegrand::entropy(), grid: &grid };
        let err = diff_fd(&w, &mu, &dir, &FdOptions { eps: 0.5, ..FdOptions::default() }).unwrap_err();
        assert!(matches!(err, Error::StepSize { .. }));
    }

    #[test]
    fn mollified_gradient_converges() {
        let l = std_normal();
        let grid = QuadratureGrid::for_reference(&l, 512).unwrap();
        let mu = pushforward(&l, AffineMap::<1>::scaling(1.0));
        let nodes = MeasureNodes::new(&mu, &grid).unwrap();
        let f = EnergyIntegrand::entropy();
        let h = h_f(&f, &nodes);
        let errs: Vec<f64> =
            [4, 8, 16, 32].iter().map(|&m| mollified_gradient(&f, &mu, m, &nodes).unwrap().l2_distance(&h, &nodes)).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        assert!(errs[3] < 1e-2);
    }

    #[test]
    fn mollification_of_flat_density_is_exact() {
        // ρ = 1/4 on [−2, 2], smoothly closed outside
        let rho = |y: f64| -> Result<f64> {
            let t = (y.abs() - 2.0).max(0.0);
            Ok(0.25 * (-t * t * 50.0).exp())
        };
        let f = EnergyIntegrand::entropy();
        let pts = [-1.0, -0.3, 0.0, 0.8, 1.5];
        let v = mollified_gradient_density(&f, rho, -3.0, 3.0, 8, &pts).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-8), "{v:?}");
    }

    #[test]
    fn square_field_identities() {
        let l = std_normal();
        let grid = QuadratureGrid::for_reference(&l, 512).unwrap();
        let mu = pushforward(&l, AffineMap::<1>::scaling(1.3));
        let nodes = MeasureNodes::new(&mu, &grid).unwrap();
        let h = TestFunction::Tanh { axis: 0, scale: 1.5 };
        let u = CylinderFunction::linear(h.clone());
        let g1 = square_field(&u, &u, &nodes, &GammaWeight::unit()).value;
        let want = nodes.integrate(|_, y| h.grad(y)[0].powi(2));
        assert!((g1 - want).abs() < 1e-14);
        let c = CylinderFunction::constant(2.0);
        assert_eq!(square_field(&c, &c, &nodes, &GammaWeight::unit()).value, 0.0);
        // product rule
        let v = CylinderFunction::new(Outer::Sin, vec![TestFunction::Moment { axis: 0, power: 2 }]).unwrap();
        let w = CylinderFunction::linear(TestFunction::Gaussian { center: [0.3], width: 0.8 });
        let g = GammaWeight::new(GammaKind::Tanh { base: 1.0, amplitude: 0.4, scale: 1.0 }, 2.0).unwrap();
        let lhs = square_field(&u.product(&v), &w, &nodes, &g).value;
        let rhs = u.eval(&nodes) * square_field(&v, &w, &nodes, &g).value + v.eval(&nodes) * square_field(&u, &w, &nodes, &g).value;
        assert!((lhs - rhs).abs() < 1e-8);
    }
}
