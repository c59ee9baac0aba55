//! Near-identity diffeomorphisms `φ = id + Σ c_k φ_k` and their certificates.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::basis::{accumulate, Jet, VectorFieldBasis};
use crate::error::{fmt_point, Error, Result};
use crate::linalg::{self, identity, inverse, mat_mul, mat_vec, norm, op_norm, solve, sub, zero, Matrix, Point, Tensor3};
use crate::quadrature::QuadratureGrid;
use crate::reference::ReferenceMeasure;

pub const INVERT_TOL: f64 = 1e-12;
const MAX_INVERT_ITERATIONS: usize = 200;

/// A smooth map `ℝ^D → ℝ^D` with a computable inverse.
pub trait Map<const D: usize> {
    /// Value, Jacobian and second derivatives at `x`.
    fn jet(&self, x: &Point<D>) -> Jet<D>;

    fn eval(&self, x: &Point<D>) -> Point<D> {
        self.jet(x).value
    }

    fn jacobian(&self, x: &Point<D>) -> Matrix<D> {
        self.jet(x).jac
    }

    fn hessian(&self, x: &Point<D>) -> Tensor3<D> {
        self.jet(x).hess
    }

    /// `(x, iterations)` with `|φ(x) − y| ≤ 10⁻¹²`.
    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        newton_invert(self, y, *y, 0)
    }

    fn invert(&self, y: &Point<D>) -> Result<Point<D>> {
        self.invert_counted(y).map(|(x, _)| x)
    }

    /// `κ` with `‖∇(φ − id)‖_∞ ≤ κ`, when known.
    fn contraction(&self) -> Option<f64> {
        None
    }
}

/// `det ∇φ(x)`, rejecting non-positive values.
pub fn det_jacobian<const D: usize, M: Map<D> + ?Sized>(map: &M, x: &Point<D>) -> Result<f64> {
    checked_det(&map.jacobian(x), x)
}

/// `∇ det ∇φ(x)` by Jacobi's formula.
pub fn grad_det_jacobian<const D: usize, M: Map<D> + ?Sized>(map: &M, x: &Point<D>) -> Result<Point<D>> {
    let j = map.jet(x);
    checked_det(&j.jac, x)?;
    Ok(linalg::grad_det(&j.jac, &j.hess))
}

pub(crate) fn checked_det<const D: usize>(jac: &Matrix<D>, x: &Point<D>) -> Result<f64> {
    let d = linalg::det(jac);
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::NonPositiveDeterminant { det: d, point: fmt_point(x) })
    }
}

/// Newton iteration from `start`, with step halving on residual growth.
fn newton_invert<const D: usize, M: Map<D> + ?Sized>(
    map: &M,
    y: &Point<D>,
    start: Point<D>,
    spent: usize,
) -> Result<(Point<D>, usize)> {
    let mut x = start;
    let mut j = map.jet(&x);
    let mut r = sub(&j.value, y);
    let mut res = norm(&r);
    let mut it = spent;
    while res > 0.25 * INVERT_TOL {
        if it >= MAX_INVERT_ITERATIONS {
            return Err(Error::InversionFailed { iterations: it, residual: res });
        }
        it += 1;
        let step = solve(&j.jac, &r).ok_or(Error::InversionFailed { iterations: it, residual: res })?;
        let mut t = 1.0;
        loop {
            let cand = sub(&x, &linalg::scale(&step, t));
            let cj = map.jet(&cand);
            let cr = sub(&cj.value, y);
            let cres = norm(&cr);
            if cres < res || t < 1e-6 {
                x = cand;
                j = cj;
                r = cr;
                // residual stagnating at rounding level
                if cres >= res && norm(&step) * t < 1e-15 * (1.0 + norm(&x)) {
                    return Ok((x, it));
                }
                res = cres;
                break;
            }
            t *= 0.5;
        }
        if norm(&step) * t < 4.0 * f64::EPSILON * (1.0 + norm(&x)) {
            break;
        }
    }
    Ok((x, it))
}

/// Cached certified bounds of `φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffeoBounds {
    /// `≥ ‖∇φ‖_∞`
    pub jac: f64,
    /// `≥ ‖∇²φ‖_∞`
    pub hess: f64,
    /// `≥ ‖∇φ⁻¹‖_∞`, infinite when not certified
    pub inv_jac: f64,
    /// `|φ(0)|`
    pub origin: f64,
}

/// `φ = id + Σ c_k φ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffeo<const D: usize> {
    basis: Arc<VectorFieldBasis<D>>,
    coeffs: Vec<f64>,
    kappa: f64,
    bounds: DiffeoBounds,
}

impl<const D: usize> Diffeo<D> {
    pub fn identity(basis: Arc<VectorFieldBasis<D>>) -> Self {
        let k = basis.len();
        Self::new(basis, alloc::vec![0.0; k]).expect("zero coefficients are valid")
    }

    /// Missing trailing coefficients are zero.
    pub fn new(basis: Arc<VectorFieldBasis<D>>, mut coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() > basis.len() {
            return Err(Error::InvalidParameter {
                name: "coeffs",
                reason: format!("{} coefficients for a basis of {} fields", coeffs.len(), basis.len()),
            });
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter { name: "coeffs", reason: format!("coefficient {i} is not finite") });
        }
        coeffs.resize(basis.len(), 0.0);
        let bd = basis.bounds();
        let kappa: f64 = coeffs.iter().zip(bd).map(|(c, b)| c.abs() * b.lip).sum();
        let hess: f64 = coeffs.iter().zip(bd).map(|(c, b)| c.abs() * b.hess).sum();
        let origin = norm(&basis.combine_value(&coeffs, &zero()));
        let inv_jac = if kappa < 1.0 { 1.0 / (1.0 - kappa) } else { f64::INFINITY };
        Ok(Diffeo { kappa, bounds: DiffeoBounds { jac: 1.0 + kappa, hess, inv_jac, origin }, basis, coeffs })
    }

    pub fn basis(&self) -> &Arc<VectorFieldBasis<D>> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Certified `κ = Σ|c_k| L_k ≥ ‖∇(φ − id)‖_∞`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn bounds(&self) -> &DiffeoBounds {
        &self.bounds
    }

    /// `κ < 1`: bijective with a Lipschitz inverse.
    pub fn is_contraction(&self) -> bool {
        self.kappa < 1.0
    }

    /// `sup |φ − id|` from the field bounds.
    pub fn displacement_bound(&self) -> f64 {
        self.coeffs.iter().zip(self.basis.bounds()).map(|(c, b)| c.abs() * b.sup).sum()
    }

    /// `ψ = φ − id` at `x`.
    pub fn field(&self, x: &Point<D>) -> Point<D> {
        self.basis.combine_value(&self.coeffs, x)
    }

    /// Jets of `φ` on nodes whose basis values are cached.
    pub fn jet_cached(&self, x: &Point<D>, cached: &[Jet<D>]) -> Jet<D> {
        let mut out = Jet::zero();
        for (c, m) in self.coeffs.iter().zip(cached) {
            if *c != 0.0 {
                accumulate(&mut out, *c, m);
            }
        }
        add_identity(&mut out, x);
        out
    }
}

fn add_identity<const D: usize>(j: &mut Jet<D>, x: &Point<D>) {
    for i in 0..D {
        j.value[i] += x[i];
        j.jac[i][i] += 1.0;
    }
}

impl<const D: usize> Map<D> for Diffeo<D> {
    fn contraction(&self) -> Option<f64> {
        Some(self.kappa)
    }

    fn jet(&self, x: &Point<D>) -> Jet<D> {
        let mut j = self.basis.combine(&self.coeffs, x);
        add_identity(&mut j, x);
        j
    }

    fn eval(&self, x: &Point<D>) -> Point<D> {
        linalg::add(x, &self.field(x))
    }

    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        if self.kappa < 1.0 {
            // contraction x ← y − ψ(x) down to a coarse residual, then Newton
            let mut x = *y;
            let mut it = 0;
            loop {
                let next = sub(y, &self.field(&x));
                let step = norm(&sub(&next, &x));
                x = next;
                it += 1;
                if step < 1e-4 || it >= MAX_INVERT_ITERATIONS {
                    break;
                }
            }
            return newton_invert(self, y, x, it);
        }
        if D == 1 {
            return monotone_invert_1d(self, y[0], self.displacement_bound()).map(|(x, it)| {
                let mut p = [0.0; D];
                p[0] = x;
                (p, it)
            });
        }
        newton_invert(self, y, *y, 0)
    }
}

/// Safeguarded Newton on a bracket for increasing 1-d maps with `|φ − id| ≤ sup_disp`.
fn monotone_invert_1d<const D: usize, M: Map<D> + ?Sized>(map: &M, y: f64, sup_disp: f64) -> Result<(f64, usize)> {
    let at = |x: f64| {
        let mut p = [0.0; D];
        p[0] = x;
        let j = map.jet(&p);
        (j.value[0] - y, j.jac[0][0])
    };
    let mut lo = y - sup_disp - 1e-12;
    let mut hi = y + sup_disp + 1e-12;
    let (flo, _) = at(lo);
    let (fhi, _) = at(hi);
    if !(flo <= 0.0 && fhi >= 0.0) {
        return Err(Error::InversionFailed { iterations: 0, residual: flo.abs().min(fhi.abs()) });
    }
    let mut x = y;
    for it in 1..=MAX_INVERT_ITERATIONS {
        let (f, df) = at(x);
        if f.abs() <= INVERT_TOL {
            return Ok((x, it));
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        x = if df > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            return Ok((x, it));
        }
    }
    let (f, _) = at(x);
    Err(Error::InversionFailed { iterations: MAX_INVERT_ITERATIONS, residual: f.abs() })
}

/// `x ↦ A x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap<const D: usize> {
    pub matrix: Matrix<D>,
    pub shift: Point<D>,
}

impl<const D: usize> AffineMap<D> {
    pub fn scaling(s: f64) -> Self {
        let mut m = identity::<D>();
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = s;
        }
        AffineMap { matrix: m, shift: zero() }
    }

    pub fn translation(shift: Point<D>) -> Self {
        AffineMap { matrix: identity(), shift }
    }
}

impl<const D: usize> Map<D> for AffineMap<D> {
    fn contraction(&self) -> Option<f64> {
        Some(op_norm(&linalg::sub_matrix(&self.matrix, &identity())))
    }

    fn jet(&self, x: &Point<D>) -> Jet<D> {
        let mut j = Jet::zero();
        j.value = linalg::add(&mat_vec(&self.matrix, x), &self.shift);
        j.jac = self.matrix;
        j
    }

    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        let inv = inverse(&self.matrix).ok_or(Error::InversionFailed { iterations: 0, residual: f64::INFINITY })?;
        Ok((mat_vec(&inv, &sub(y, &self.shift)), 0))
    }
}

/// `outer ∘ inner`, evaluated pointwise.
#[derive(Debug, Clone, Copy)]
pub struct Composition<A, B> {
    pub outer: A,
    pub inner: B,
}

pub fn compose<const D: usize, A: Map<D>, B: Map<D>>(outer: A, inner: B) -> Composition<A, B> {
    Composition { outer, inner }
}

impl<const D: usize, A: Map<D>, B: Map<D>> Map<D> for Composition<A, B> {
    fn jet(&self, x: &Point<D>) -> Jet<D> {
        let b = self.inner.jet(x);
        let a = self.outer.jet(&b.value);
        let mut out = Jet::zero();
        out.value = a.value;
        out.jac = mat_mul(&a.jac, &b.jac);
        for i in 0..D {
            for p in 0..D {
                for q in 0..D {
                    let mut h = 0.0;
                    for j in 0..D {
                        h += a.jac[i][j] * b.hess[j][p][q];
                        for k in 0..D {
                            h += a.hess[i][j][k] * b.jac[j][p] * b.jac[k][q];
                        }
                    }
                    out.hess[i][p][q] = h;
                }
            }
        }
        out
    }

    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        let (z, i1) = self.outer.invert_counted(y)?;
        let (x, i2) = self.inner.invert_counted(&z)?;
        Ok((x, i1 + i2))
    }
}

impl<const D: usize, M: Map<D> + ?Sized> Map<D> for &M {
    fn jet(&self, x: &Point<D>) -> Jet<D> {
        (**self).jet(x)
    }
    fn contraction(&self) -> Option<f64> {
        (**self).contraction()
    }
    fn eval(&self, x: &Point<D>) -> Point<D> {
        (**self).eval(x)
    }
    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        (**self).invert_counted(y)
    }
}

impl<const D: usize, M: Map<D> + ?Sized> Map<D> for Arc<M> {
    fn jet(&self, x: &Point<D>) -> Jet<D> {
        (**self).jet(x)
    }
    fn contraction(&self) -> Option<f64> {
        (**self).contraction()
    }
    fn eval(&self, x: &Point<D>) -> Point<D> {
        (**self).eval(x)
    }
    fn invert_counted(&self, y: &Point<D>) -> Result<(Point<D>, usize)> {
        (**self).invert_counted(y)
    }
}

/// The inverse `φ⁻¹` as a map.
#[derive(Debug, Clone, Copy)]
pub struct Inverse<M>(pub M);

impl<const D: usize, M: Map<D>> Map<D> for Inverse<M> {
    fn jet(&self, y: &Point<D>) -> Jet<D> {
        let x = self.0.invert(y).unwrap_or([f64::NAN; D]);
        let fj = self.0.jet(&x);
        let ginv = inverse(&fj.jac).unwrap_or([[f64::NAN; D]; D]);
        // ∂²(φ⁻¹)_i = −G ∂²φ (G·, G·)
        let mut out = Jet::zero();
        out.value = x;
        out.jac = ginv;
        for i in 0..D {
            for p in 0..D {
                for q in 0..D {
                    let mut h = 0.0;
                    for j in 0..D {
                        for a in 0..D {
                            for b in 0..D {
                                h -= ginv[i][j] * fj.hess[j][a][b] * ginv[a][p] * ginv[b][q];
                            }
                        }
                    }
                    out.hess[i][p][q] = h;
                }
            }
        }
        out
    }

    fn invert_counted(&self, x: &Point<D>) -> Result<(Point<D>, usize)> {
        Ok((self.0.eval(x), 0))
    }
}

/// A metric value; `analytic` is a certified upper bound when available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricEstimate {
    pub grid: f64,
    pub analytic: Option<f64>,
}

/// Grid on which sup-norms are measured.
pub fn certification_grid<const D: usize>(reference: &ReferenceMeasure<D>) -> Result<QuadratureGrid<D>> {
    QuadratureGrid::default_for(reference)
}

/// `(|f(0)|, sup‖∇f‖, sup‖∇²f‖)` of `f = a − b` sampled on `grid`.
fn difference_norms<const D: usize, A: Map<D>, B: Map<D>>(a: &A, b: &B, grid: &QuadratureGrid<D>) -> (f64, f64, f64) {
    let o = norm(&sub(&a.eval(&zero()), &b.eval(&zero())));
    let mut gj: f64 = 0.0;
    let mut gh: f64 = 0.0;
    for x in grid.nodes() {
        let ja = a.jet(x);
        let jb = b.jet(x);
        let mut dj = ja.jac;
        let mut dh = ja.hess;
        for i in 0..D {
            for p in 0..D {
                dj[i][p] -= jb.jac[i][p];
                for q in 0..D {
                    dh[i][p][q] -= jb.hess[i][p][q];
                }
            }
        }
        gj = gj.max(op_norm(&dj));
        gh = gh.max(tensor_norm(&dh));
    }
    (o, gj, gh)
}

/// Frobenius norm, an upper bound of the bilinear-operator norm.
pub fn tensor_norm<const D: usize>(t: &Tensor3<D>) -> f64 {
    t.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn same_basis<const D: usize>(a: &Diffeo<D>, b: &Diffeo<D>) -> bool {
    Arc::ptr_eq(&a.basis, &b.basis) || a.basis == b.basis
}

/// `d_D = |(φ₁ − φ₂)(0)| + ‖∇(φ₁ − φ₂)‖_∞`.
pub fn d_d<const D: usize>(a: &Diffeo<D>, b: &Diffeo<D>, grid: &QuadratureGrid<D>) -> MetricEstimate {
    let (o, gj, _) = difference_norms(a, b, grid);
    let analytic = same_basis(a, b).then(|| {
        o + a.coeffs.iter().zip(&b.coeffs).zip(a.basis.bounds()).map(|((x, y), bd)| (x - y).abs() * bd.lip).sum::<f64>()
    });
    MetricEstimate { grid: o + gj, analytic }
}

/// `d_{D₂} = d_D + ‖∇²(φ₁ − φ₂)‖_∞`.
pub fn d_d2<const D: usize>(a: &Diffeo<D>, b: &Diffeo<D>, grid: &QuadratureGrid<D>) -> MetricEstimate {
    let (o, gj, gh) = difference_norms(a, b, grid);
    let analytic = same_basis(a, b).then(|| {
        o + a
            .coeffs
            .iter()
            .zip(&b.coeffs)
            .zip(a.basis.bounds())
            .map(|((x, y), bd)| (x - y).abs() * (bd.lip + bd.hess))
            .sum::<f64>()
    });
    MetricEstimate { grid: o + gj + gh, analytic }
}

/// Metrics between arbitrary maps, measured on the grid only.
pub fn d_d_maps<const D: usize, A: Map<D>, B: Map<D>>(a: &A, b: &B, grid: &QuadratureGrid<D>) -> f64 {
    let (o, gj, _) = difference_norms(a, b, grid);
    o + gj
}

pub fn d_d2_maps<const D: usize, A: Map<D>, B: Map<D>>(a: &A, b: &B, grid: &QuadratureGrid<D>) -> f64 {
    let (o, gj, gh) = difference_norms(a, b, grid);
    o + gj + gh
}

/// Membership test for `D⁽ⁿ⁾ = {‖∇φ⁻¹‖_∞ + d_{D₂}(φ, 0) < n}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DnCertificate {
    pub n: f64,
    pub jac: f64,
    pub hess: f64,
    pub inv_jac: f64,
    pub origin: f64,
    /// `|φ(0)| + ‖∇φ‖_∞ + ‖∇²φ‖_∞`
    pub d_d2: f64,
    pub member: bool,
}

impl DnCertificate {
    pub fn from_bounds(bounds: &DiffeoBounds, n: f64) -> Self {
        let d_d2 = bounds.origin + bounds.jac + bounds.hess;
        let member = (bounds.inv_jac + d_d2) < n;
        DnCertificate {
            n,
            jac: bounds.jac,
            hess: bounds.hess,
            inv_jac: bounds.inv_jac,
            origin: bounds.origin,
            d_d2,
            member,
        }
    }

    /// `‖∇φ⁻¹‖_∞ + d_{D₂}(φ, 0)`; membership holds for every `n` above it.
    pub fn level(&self) -> f64 {
        self.inv_jac + self.d_d2
    }
}

/// Certificate from the analytic triangle-inequality bounds.
pub fn certify_dn<const D: usize>(phi: &Diffeo<D>, n: f64) -> DnCertificate {
    DnCertificate::from_bounds(&phi.bounds, n)
}

/// Sharper 1-d bounds: `φ′` on a fine grid, corrected by the Lipschitz
/// constant `Σ|c_k| M_k` of `φ′` between nodes and by the decay of `φ_k′`
/// with `ρ_λ` outside the window. Never looser than the analytic bounds.
pub fn refined_bounds_1d(phi: &Diffeo<1>, grid: &QuadratureGrid<1>, cache: Option<&crate::basis::NodeCache<1>>) -> DiffeoBounds {
    refined_bounds(phi, grid, cache)
}

/// [`refined_bounds_1d`] in `d = 1`, the analytic bounds otherwise.
pub fn refined_bounds<const D: usize>(
    phi: &Diffeo<D>,
    grid: &QuadratureGrid<D>,
    cache: Option<&crate::basis::NodeCache<D>>,
) -> DiffeoBounds {
    let a = phi.bounds;
    if D != 1 {
        return a;
    }
    let h = grid.spacing()[0];
    let slack = 0.5 * h * a.hess;
    let reference = phi.basis.reference();
    let edge = grid.window().hi[0].max(-grid.window().lo[0]);
    let tail = phi.kappa * reference.marginal_density(edge) / reference.sup_marginal_density();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, x) in grid.nodes().iter().enumerate() {
        let d = match cache {
            Some(c) => phi.jet_cached(x, c.at(i)).jac[0][0],
            None => phi.jacobian(x)[0][0],
        };
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let min_d = (lo - slack).min(1.0 - tail);
    let max_d = (hi + slack).max(1.0 + tail);
    let inv_jac = if min_d > 0.0 { (1.0 / min_d).min(a.inv_jac) } else { a.inv_jac };
    DiffeoBounds { jac: max_d.abs().max(min_d.abs()).min(a.jac), hess: a.hess, inv_jac, origin: a.origin }
}

/// [`certify_dn`] with [`refined_bounds_1d`].
pub fn certify_dn_refined(phi: &Diffeo<1>, n: f64, grid: &QuadratureGrid<1>) -> DnCertificate {
    DnCertificate::from_bounds(&refined_bounds_1d(phi, grid, None), n)
}
