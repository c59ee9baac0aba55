//! Energy functionals `W_F(μ) = ∫ F(x, ρ_μ(x)) dx` for the family
//! `F(x, s) = s V(x) + G(s)`, `G(s) = ∫₀^s ∫₁^t q(r)/r dr dt`.
//!
//! Integrating by parts, `G(s) = s g(s) − Q(s)` with `g(s) = ∫₁^s q(r)/r dr`
//! and `Q(s) = ∫₀^s q(r) dr`. Both are closed-form for the constant and
//! saturating `q`; for porous-media `q = β′/b` they are tabulated on a
//! `ln s` grid and read back by cubic Hermite interpolation.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::basis::Jet;
use crate::diffeo::{certify_dn, checked_det, Diffeo, Map};
use crate::error::{fmt_point, Error, Result};
use crate::linalg::{dot, Point};
use crate::measure::{importance_sample, GaussianSpec, PushforwardMeasure, SampleStats};
use crate::quadrature::{QuadratureGrid, Window};
use crate::reference::{DensityModel, ReferenceMeasure};
use crate::stats::MeanEstimate;

/// Densities below this value contribute nothing to `W_F`.
pub const S_FLOOR: f64 = 1e-300;

/// `V(x) = offset + (quadratic/2)|x|² + soft_abs·√(1 + |x|²)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Potential {
    pub offset: f64,
    pub quadratic: f64,
    pub soft_abs: f64,
}

impl Potential {
    pub fn value<const D: usize>(&self, x: &Point<D>) -> f64 {
        let r2 = dot(x, x);
        self.offset + 0.5 * self.quadratic * r2 + self.soft_abs * (1.0 + r2).sqrt()
    }

    pub fn grad<const D: usize>(&self, x: &Point<D>) -> Point<D> {
        let r2 = dot(x, x);
        let f = self.quadratic + self.soft_abs / (1.0 + r2).sqrt();
        let mut g = *x;
        g.iter_mut().for_each(|v| *v *= f);
        g
    }

    /// `sup |∇V|`, finite only without the quadratic part.
    pub fn sup_grad(&self) -> f64 {
        if self.quadratic != 0.0 {
            f64::INFINITY
        } else {
            self.soft_abs.abs()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.offset == 0.0 && self.quadratic == 0.0 && self.soft_abs == 0.0
    }
}

/// `q(r)` in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QForm {
    Constant(f64),
    /// `q0 + q1 r / (r + r0)`
    Saturating { q0: f64, q1: f64, r0: f64 },
}

/// `β(r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    /// `α r`
    Linear { alpha: f64 },
    /// `α r + δ r² / (r + r0)`
    Saturating { alpha: f64, delta: f64, r0: f64 },
}

impl Beta {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            Beta::Linear { alpha } => alpha * r,
            Beta::Saturating { alpha, delta, r0 } => alpha * r + delta * r * r / (r + r0),
        }
    }

    pub fn deriv(&self, r: f64) -> f64 {
        match *self {
            Beta::Linear { alpha } => alpha,
            Beta::Saturating { alpha, delta, r0 } => {
                let u = r0 / (r + r0);
                alpha + delta * (1.0 - u * u)
            }
        }
    }

    /// `(inf β′, sup β′)` over `r ≥ 0`.
    pub fn deriv_range(&self) -> (f64, f64) {
        match *self {
            Beta::Linear { alpha } => (alpha, alpha),
            Beta::Saturating { alpha, delta, .. } => (alpha.min(alpha + delta), alpha.max(alpha + delta)),
        }
    }
}

/// Mobility `b(r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mobility {
    Constant(f64),
    /// `b0 + b1 r / (r + r0)`
    Saturating { b0: f64, b1: f64, r0: f64 },
}

impl Mobility {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            Mobility::Constant(b) => b,
            Mobility::Saturating { b0, b1, r0 } => b0 + b1 * r / (r + r0),
        }
    }

    pub fn range(&self) -> (f64, f64) {
        match *self {
            Mobility::Constant(b) => (b, b),
            Mobility::Saturating { b0, b1, .. } => (b0.min(b0 + b1), b0.max(b0 + b1)),
        }
    }
}

/// Coefficients of `∂_t ρ = Δβ(ρ) + div(∇Φ b(ρ) ρ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PorousMedia {
    pub phi: Potential,
    pub beta: Beta,
    pub mobility: Mobility,
}

impl PorousMedia {
    /// Heat equation: `β = id`, `b ≡ 1`, `Φ = 0`.
    pub fn heat() -> Self {
        PorousMedia { phi: Potential::default(), beta: Beta::Linear { alpha: 1.0 }, mobility: Mobility::Constant(1.0) }
    }

    /// Smallest `c` with `c⁻¹ ≤ β′, b ≤ c`.
    pub fn ellipticity(&self) -> f64 {
        let (bl, bh) = self.beta.deriv_range();
        let (ml, mh) = self.mobility.range();
        [1.0 / bl, bh, 1.0 / ml, mh].into_iter().fold(1.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let (bl, _) = self.beta.deriv_range();
        let (ml, _) = self.mobility.range();
        if let Beta::Saturating { r0, .. } = self.beta {
            if !(r0 > 0.0) {
                return Err(Error::InvalidParameter { name: "beta.r0", reason: "must be positive".into() });
            }
        }
        if let Mobility::Saturating { r0, .. } = self.mobility {
            if !(r0 > 0.0) {
                return Err(Error::InvalidParameter { name: "mobility.r0", reason: "must be positive".into() });
            }
        }
        if !(bl > 0.0 && ml > 0.0 && self.ellipticity().is_finite()) {
            return Err(Error::InvalidParameter {
                name: "porous_media",
                reason: format!("need β′ and b bounded away from 0 and ∞ (inf β′ = {bl}, inf b = {ml})"),
            });
        }
        Ok(())
    }

    pub fn q(&self, r: f64) -> f64 {
        self.beta.deriv(r) / self.mobility.value(r)
    }
}

/// Which family an integrand belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Zero,
    Entropy,
    VQ,
    PorousMedia,
}

#[derive(Debug, Clone, PartialEq)]
enum Nonlinearity {
    Closed(QForm),
    Table(Arc<GTable>),
}

/// `F(x, s) = s V(x) + G(s)` with closed-form partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyIntegrand {
    potential: Potential,
    nonlinearity: Nonlinearity,
    porous: Option<PorousMedia>,
    preset: Preset,
}

impl EnergyIntegrand {
    pub fn zero() -> Self {
        EnergyIntegrand {
            potential: Potential::default(),
            nonlinearity: Nonlinearity::Closed(QForm::Constant(0.0)),
            porous: None,
            preset: Preset::Zero,
        }
    }

    /// `F(x, s) = s ln s − s`.
    pub fn entropy() -> Self {
        EnergyIntegrand {
            potential: Potential::default(),
            nonlinearity: Nonlinearity::Closed(QForm::Constant(1.0)),
            porous: None,
            preset: Preset::Entropy,
        }
    }

    pub fn vq(potential: Potential, q: QForm) -> Result<Self> {
        if let QForm::Saturating { r0, q0, q1 } = q {
            if !(r0 > 0.0) || !(q0.is_finite() && q1.is_finite()) {
                return Err(Error::InvalidParameter { name: "q", reason: "need r0 > 0 and finite q0, q1".into() });
            }
        }
        Ok(EnergyIntegrand { potential, nonlinearity: Nonlinearity::Closed(q), porous: None, preset: Preset::VQ })
    }

    /// `V = Φ`, `q = β′/b`.
    pub fn porous_media(pm: PorousMedia) -> Result<Self> {
        pm.validate()?;
        let nonlinearity = match (pm.beta, pm.mobility) {
            (Beta::Linear { alpha }, Mobility::Constant(b)) => Nonlinearity::Closed(QForm::Constant(alpha / b)),
            _ => Nonlinearity::Table(Arc::new(GTable::build(&|r| pm.q(r)))),
        };
        Ok(EnergyIntegrand { potential: pm.phi, nonlinearity, porous: Some(pm), preset: Preset::PorousMedia })
    }

    /// `F + a·s`, so that `W_{F+a} = W_F + a` on probability measures.
    pub fn shifted(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.potential.offset += a;
        out
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn porous(&self) -> Option<&PorousMedia> {
        self.porous.as_ref()
    }

    pub fn is_zero(&self) -> bool {
        self.potential.is_zero() && self.nonlinearity == Nonlinearity::Closed(QForm::Constant(0.0))
    }

    pub fn describe(&self) -> String {
        format!("{:?}", self.preset)
    }

    pub fn q(&self, s: f64) -> f64 {
        match &self.nonlinearity {
            Nonlinearity::Closed(QForm::Constant(c)) => *c,
            Nonlinearity::Closed(QForm::Saturating { q0, q1, r0 }) => q0 + q1 * s / (s + r0),
            Nonlinearity::Table(_) => self.porous.as_ref().map_or(0.0, |p| p.q(s)),
        }
    }

    /// `g(s) = ∫₁^s q(r)/r dr`.
    pub fn g(&self, s: f64) -> f64 {
        match &self.nonlinearity {
            Nonlinearity::Closed(QForm::Constant(c)) => c * s.ln(),
            Nonlinearity::Closed(QForm::Saturating { q0, q1, r0 }) => q0 * s.ln() + q1 * ((s + r0) / (1.0 + r0)).ln(),
            Nonlinearity::Table(t) => t.g(s),
        }
    }

    /// `G(s) = ∫₀^s g(t) dt`.
    pub fn big_g(&self, s: f64) -> f64 {
        if s < S_FLOOR {
            return 0.0;
        }
        match &self.nonlinearity {
            Nonlinearity::Closed(QForm::Constant(c)) => c * (s * s.ln() - s),
            Nonlinearity::Closed(QForm::Saturating { q0, q1, r0 }) => {
                q0 * (s * s.ln() - s)
                    + q1 * (s * ((s + r0) / (1.0 + r0)).ln() + r0 * (s / r0).ln_1p() - s)
            }
            Nonlinearity::Table(t) => s * t.g(s) - t.big_q(s),
        }
    }

    pub fn f<const D: usize>(&self, x: &Point<D>, s: f64) -> f64 {
        if s < S_FLOOR {
            return 0.0;
        }
        let v = if self.potential.is_zero() { 0.0 } else { s * self.potential.value(x) };
        v + self.big_g(s)
    }

    /// `∂₂F = V + g(s)`.
    pub fn d2f<const D: usize>(&self, x: &Point<D>, s: f64) -> f64 {
        self.potential.value(x) + self.g(s)
    }

    /// `∇₁∂₂F = ∇V`.
    pub fn grad1_d2f<const D: usize>(&self, x: &Point<D>) -> Point<D> {
        self.potential.grad(x)
    }

    /// `∂₂∂₂F = q(s)/s`.
    pub fn d2d2f(&self, s: f64) -> f64 {
        self.q(s) / s
    }

    /// `H_F = ∇V + q(ρ) ∇ρ / ρ` at a point with density `rho` and gradient `grad`.
    pub fn gradient_at<const D: usize>(&self, x: &Point<D>, rho: f64, grad: &Point<D>) -> Point<D> {
        let mut h = self.grad1_d2f(x);
        let f = self.q(rho) / rho;
        for a in 0..D {
            h[a] += f * grad[a];
        }
        h
    }

    /// `c̃` with `|F(x, s)| ≤ c̃ s (1 + |x| + |ln s|)`; infinite with a quadratic potential.
    pub fn growth_constant(&self) -> f64 {
        let v = self.potential.offset.abs() + self.potential.soft_abs.abs();
        if self.potential.quadratic != 0.0 {
            return f64::INFINITY;
        }
        let q = match &self.nonlinearity {
            Nonlinearity::Closed(QForm::Constant(c)) => c.abs(),
            Nonlinearity::Closed(QForm::Saturating { q0, q1, .. }) => q0.abs() + q1.abs(),
            Nonlinearity::Table(_) => {
                let pm = self.porous.as_ref().expect("tables come from porous media");
                pm.beta.deriv_range().1 / pm.mobility.range().0
            }
        };
        v + q
    }
}

const TABLE_V_MIN: f64 = -690.775_527_898_213_7; // ln 1e-300
const TABLE_V_MAX: f64 = 13.815_510_557_964_274; // ln 1e6
const TABLE_STEP: f64 = 0.005;

/// `g` and `Q` on a uniform grid in `v = ln s`.
#[derive(Debug, Clone, PartialEq)]
struct GTable {
    h: f64,
    q: Vec<f64>,
    g: Vec<f64>,
    big_q: Vec<f64>,
}

impl GTable {
    fn build(q: &dyn Fn(f64) -> f64) -> Self {
        let n = ((TABLE_V_MAX - TABLE_V_MIN) / TABLE_STEP).ceil() as usize + 1;
        let h = (TABLE_V_MAX - TABLE_V_MIN) / (n - 1) as f64;
        // 5-point Gauss–Legendre on each cell
        const X: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
        const W: [f64; 5] = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
        let v_at = |i: usize| TABLE_V_MIN + i as f64 * h;
        let qv: Vec<f64> = (0..n).map(|i| q(v_at(i).exp())).collect();
        let mut inc_g = alloc::vec![0.0; n];
        let mut inc_q = alloc::vec![0.0; n];
        for i in 1..n {
            let mid = 0.5 * (v_at(i - 1) + v_at(i));
            let (mut a, mut b) = (0.0, 0.0);
            for (x, w) in X.iter().zip(W) {
                let v = mid + 0.5 * h * x;
                let e = v.exp();
                let qq = q(e);
                a += w * qq;
                b += w * qq * e;
            }
            inc_g[i] = 0.5 * h * a;
            inc_q[i] = 0.5 * h * b;
        }
        // g is anchored at s = 1 (v = 0), Q at s → 0
        let mut g = alloc::vec![0.0; n];
        let mut big_q = alloc::vec![0.0; n];
        big_q[0] = qv[0] * v_at(0).exp();
        for i in 1..n {
            g[i] = g[i - 1] + inc_g[i];
            big_q[i] = big_q[i - 1] + inc_q[i];
        }
        let zero = -TABLE_V_MIN / h;
        let i0 = zero.floor() as usize;
        let g_at_zero = hermite(g[i0], g[i0 + 1], qv[i0], qv[i0 + 1], h, zero - i0 as f64);
        g.iter_mut().for_each(|x| *x -= g_at_zero);
        GTable { h, q: qv, g, big_q }
    }

    fn locate(&self, s: f64) -> Option<(usize, f64, f64)> {
        let v = s.ln();
        let t = (v - TABLE_V_MIN) / self.h;
        if !(t >= 0.0) || t > (self.q.len() - 1) as f64 {
            return None;
        }
        let i = (t.floor() as usize).min(self.q.len() - 2);
        Some((i, t - i as f64, v))
    }

    fn g(&self, s: f64) -> f64 {
        match self.locate(s) {
            Some((i, t, _)) => hermite(self.g[i], self.g[i + 1], self.q[i], self.q[i + 1], self.h, t),
            None => f64::NAN,
        }
    }

    fn big_q(&self, s: f64) -> f64 {
        match self.locate(s) {
            Some((i, t, _)) => {
                let e0 = (TABLE_V_MIN + i as f64 * self.h).exp();
                let e1 = e0 * self.h.exp();
                hermite(self.big_q[i], self.big_q[i + 1], self.q[i] * e0, self.q[i + 1] * e1, self.h, t)
            }
            None => f64::NAN,
        }
    }
}

/// Cubic Hermite on `[0, 1]` with endpoint slopes given per unit of `v`.
fn hermite(y0: f64, y1: f64, d0: f64, d1: f64, h: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// `∫ F(y, ρ_μ(y)) dy` on a Lebesgue grid in `y`.
pub fn w_direct<const D: usize, M: Map<D>>(
    f: &EnergyIntegrand,
    mu: &PushforwardMeasure<D, M>,
    grid: &QuadratureGrid<D>,
) -> Result<f64> {
    if f.is_zero() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, (y, w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
        let rho = mu.density(y)?;
        let v = f.f(y, rho);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { index: i, point: fmt_point(y), value: v });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// The `y`-window `[φ(−L), φ(L)]` matching the λ-window of a 1-d pushforward.
pub fn direct_grid_1d<M: Map<1>>(mu: &PushforwardMeasure<1, M>, per_axis: usize) -> Result<QuadratureGrid<1>> {
    let l = mu.reference().window_half_width();
    let lo = mu.map().eval(&[-l]);
    let hi = mu.map().eval(&[l]);
    QuadratureGrid::new(Window { lo, hi }, per_axis)
}

/// `∫ F(φ(x), ρ_λ(x)/J(x)) J(x) dx` on a Lebesgue grid in `x`; no inversion.
pub fn w_pushforward<const D: usize, M: Map<D>>(
    f: &EnergyIntegrand,
    reference: &ReferenceMeasure<D>,
    phi: &M,
    grid: &QuadratureGrid<D>,
) -> Result<f64> {
    if f.is_zero() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, (x, w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
        let j = phi.jet(x);
        acc += w * pushforward_term(f, reference, x, &j, i)?;
    }
    Ok(acc)
}

pub(crate) fn pushforward_term<const D: usize>(
    f: &EnergyIntegrand,
    reference: &ReferenceMeasure<D>,
    x: &Point<D>,
    jet: &Jet<D>,
    index: usize,
) -> Result<f64> {
    let det = checked_det(&jet.jac, x)?;
    let v = f.f(&jet.value, reference.density(x) / det) * det;
    if !v.is_finite() {
        return Err(Error::NonFiniteIntegrand { index, point: fmt_point(x), value: v });
    }
    Ok(v)
}

/// `∫ F(x, ρ(x)) dx` for a cell-averaged 1-d density (midpoint rule).
pub fn w_cells(f: &EnergyIntegrand, lo: f64, dx: f64, cells: &[f64]) -> f64 {
    cells.iter().enumerate().map(|(i, r)| f.f(&[lo + (i as f64 + 0.5) * dx], *r) * dx).sum()
}

/// Outcome of [`check_c2`].
#[derive(Debug, Clone, PartialEq)]
pub struct C2Report {
    /// `(half-width, ∫ F̄_α dx over [−L, L])` for doubling windows
    pub windows: Vec<(f64, f64)>,
    pub value: f64,
    pub finite: bool,
}

/// Lower-bound probe of `∫ F̄_α(x) dx`, with
/// `F̄_α(x) = sup{|F(y, t ρ_λ(x))| : |y| ≤ α(1 + |x|), t ∈ [α⁻¹, α]}`.
/// The sup is a maximum over a `(y, t)` sub-grid; the verdict comes from a
/// window-doubling study. A necessary-condition probe, not a proof.
pub fn check_c2<F: Fn(&Point<1>, f64) -> f64>(f: F, reference: &ReferenceMeasure<1>, alpha: f64) -> Result<C2Report> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter { name: "alpha", reason: format!("must lie in (1, ∞), got {alpha}") });
    }
    const Y_NODES: usize = 41;
    const T_NODES: usize = 21;
    let bar = |x: f64| -> f64 {
        let rho = reference.marginal_density(x);
        let r = alpha * (1.0 + x.abs());
        let mut best: f64 = 0.0;
        for iy in 0..Y_NODES {
            let y = -r + 2.0 * r * iy as f64 / (Y_NODES - 1) as f64;
            for it in 0..T_NODES {
                let t = alpha.powf(-1.0 + 2.0 * it as f64 / (T_NODES - 1) as f64);
                let v = f(&[y], t * rho).abs();
                if v.is_nan() {
                    return f64::INFINITY;
                }
                best = best.max(v);
            }
        }
        best
    };
    let base = reference.window_half_width();
    let mut windows = Vec::new();
    for level in 0..4 {
        let l = base * (1u32 << level) as f64;
        let n = (64.0 * l).ceil() as usize + 1;
        let h = 2.0 * l / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            acc += w * bar(-l + i as f64 * h);
        }
        windows.push((l, acc));
    }
    let value = windows.last().map_or(0.0, |w| w.1);
    let prev = windows[windows.len() - 2].1;
    let finite = value.is_finite() && (value - prev).abs() <= 1e-3 * (1.0 + value.abs());
    Ok(C2Report { windows, value, finite })
}

/// Outcome of [`estimate_zf`].
#[derive(Debug, Clone, PartialEq)]
pub struct ZReport {
    /// plain Monte Carlo mean of `e^{−W_F}` with its standard error
    pub z: MeanEstimate,
    pub ess: f64,
    /// smallest `c₂` with `−W_F ≤ c₂(1 + ‖φ‖_{D,2})` on the first half
    pub c2: f64,
    /// `max(−W_F − c₂(1 + ‖φ‖_{D,2}))` on the second half
    pub bound_excess: f64,
    pub stats: SampleStats,
}

/// `Z_F = ∫ e^{−W_F(λ∘φ⁻¹)} Λ⁽ⁿ⁾(dφ)` by Monte Carlo over conditioned draws.
pub fn estimate_zf<const D: usize, R: Rng + ?Sized>(
    spec: &GaussianSpec<D>,
    f: &EnergyIntegrand,
    count: usize,
    rng: &mut R,
) -> Result<ZReport> {
    let reference = spec.basis().reference().clone();
    let grid = QuadratureGrid::default_for(&reference)?;
    let ens = importance_sample(spec, count, rng, |phi: &Diffeo<D>| w_pushforward(f, &reference, phi, &grid))?;
    let mut z = crate::stats::Welford::default();
    ens.log_weights.iter().for_each(|l| z.push(l.exp()));
    let norms: Vec<f64> = ens.samples.iter().map(|p| certify_dn(p, f64::INFINITY).d_d2).collect();
    let half = count / 2;
    let c2 = (0..half).map(|i| ens.log_weights[i] / (1.0 + norms[i])).fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let bound_excess =
        (half..count).map(|i| ens.log_weights[i] - c2 * (1.0 + norms[i])).fold(f64::NEG_INFINITY, f64::max);
    Ok(ZReport { z: z.estimate(), ess: ens.ess()?, c2, bound_excess, stats: ens.stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_warped_trig_basis, WeightVariant};
    use crate::diffeo::AffineMap;
    use crate::measure::{pushforward, Conditioning};
    use crate::reference::make_gaussian_reference;
    use core::f64::consts::{E, PI};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss_entropy_energy(var: f64) -> f64 {
        -0.5 * (2.0 * PI * E * var).ln() - 1.0
    }

    #[test]
    fn entropy_of_gaussians() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let f = EnergyIntegrand::entropy();
        let mu = pushforward(&l, AffineMap::<1>::scaling(1.0));
        let w1 = w_direct(&f, &mu, &direct_grid_1d(&mu, 2048).unwrap()).unwrap();
        assert!((w1 - gauss_entropy_energy(1.0)).abs() < 1e-6);
        assert!((w1 + 2.41894).abs() < 1e-5);
        let mu2 = pushforward(&l, AffineMap::<1>::scaling(2.0));
        let w2 = w_direct(&f, &mu2, &direct_grid_1d(&mu2, 2048).unwrap()).unwrap();
        assert!((w2 + 3.11208).abs() < 1e-5);
        let g = QuadratureGrid::default_for(&l).unwrap();
        let wp = w_pushforward(&f, &l, &AffineMap::<1>::scaling(2.0), &g).unwrap();
        assert!((wp - w2).abs() < 1e-9);
        // W(N(0, σ²)) = W(N(0, 1)) − ln σ
        for s in [0.5, 1.5, 3.0] {
            let w = w_pushforward(&f, &l, &AffineMap::<1>::scaling(s), &g).unwrap();
            assert!((w - (w1 - s.ln())).abs() < 1e-7);
        }
        assert_eq!(w_direct(&EnergyIntegrand::zero(), &mu, &direct_grid_1d(&mu, 64).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn saturating_closed_form_matches_table() {
        let (q0, q1, r0) = (0.7, 0.9, 0.3);
        let closed = EnergyIntegrand::vq(Potential::default(), QForm::Saturating { q0, q1, r0 }).unwrap();
        let table = GTable::build(&|r| q0 + q1 * r / (r + r0));
        for s in [1e-250, 1e-30, 1e-6, 0.01, 0.3, 1.0, 2.5, 40.0, 9e5] {
            let gc = closed.g(s);
            let gt = table.g(s);
            assert!((gc - gt).abs() <= 1e-10 * (1.0 + gc.abs()), "g({s}): {gc} vs {gt}");
            let big_c = closed.big_g(s);
            let big_t = s * gt - table.big_q(s);
            assert!((big_c - big_t).abs() <= 1e-10 * (s + big_c.abs()), "G({s}): {big_c} vs {big_t}");
        }
    }

    #[test]
    fn partial_derivatives_match_differences() {
        let pm = PorousMedia {
            phi: Potential { offset: 0.1, quadratic: 0.0, soft_abs: 0.4 },
            beta: Beta::Saturating { alpha: 1.0, delta: 0.5, r0: 0.2 },
            mobility: Mobility::Saturating { b0: 1.0, b1: 0.3, r0: 0.5 },
        };
        let presets = [
            EnergyIntegrand::entropy(),
            EnergyIntegrand::vq(Potential { offset: 0.0, quadratic: 0.5, soft_abs: 0.2 }, QForm::Saturating { q0: 1.0, q1: 0.5, r0: 0.1 }).unwrap(),
            EnergyIntegrand::porous_media(pm).unwrap(),
        ];
        for f in &presets {
            for &(x, s) in &[(0.3, 0.2), (-1.2, 0.05), (2.0, 0.9)] {
                let h = 1e-6 * s;
                let d2 = (f.f(&[x], s + h) - f.f(&[x], s - h)) / (2.0 * h);
                assert!((d2 - f.d2f(&[x], s)).abs() < 1e-6, "{:?}", f.preset());
                let d22 = (f.d2f(&[x], s + h) - f.d2f(&[x], s - h)) / (2.0 * h);
                assert!((d22 - f.d2d2f(s)).abs() < 1e-5 * (1.0 + d22.abs()));
                let hx = 1e-6;
                let g1 = (f.d2f(&[x + hx], s) - f.d2f(&[x - hx], s)) / (2.0 * hx);
                assert!((g1 - f.grad1_d2f(&[x])[0]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn growth_bound_holds() {
        let fs = [
            EnergyIntegrand::entropy(),
            EnergyIntegrand::vq(Potential { offset: -0.3, quadratic: 0.0, soft_abs: 0.8 }, QForm::Saturating { q0: 0.5, q1: 1.5, r0: 2.0 }).unwrap(),
            EnergyIntegrand::porous_media(PorousMedia {
                phi: Potential { offset: 0.0, quadratic: 0.0, soft_abs: 1.0 },
                beta: Beta::Saturating { alpha: 1.0, delta: 1.0, r0: 0.5 },
                mobility: Mobility::Constant(2.0),
            })
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in &fs {
            let c = f.growth_constant();
            for _ in 0..2000 {
                let x: f64 = rng.gen_range(-20.0..20.0);
                let s = 10f64.powf(rng.gen_range(-12.0..5.0));
                assert!(f.f(&[x], s).abs() <= c * s * (1.0 + x.abs() + s.ln().abs()) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn c2_probe() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let ent = EnergyIntegrand::entropy();
        let r = check_c2(|x, s| ent.f(x, s), &l, 2.0).unwrap();
        assert!(r.finite && r.value > 0.0);
        let zero = check_c2(|_, _| 0.0, &l, 2.0).unwrap();
        assert_eq!(zero.value, 0.0);
        let quad_exp = check_c2(|x, s| (x[0] * x[0]).exp() * s, &l, 2.0).unwrap();
        assert!(!quad_exp.finite);
    }

    #[test]
    fn z_estimates() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let spec = GaussianSpec::new(
            Arc::new(build_warped_trig_basis(&l, 8).unwrap()),
            WeightVariant::GradientAndHessian,
            Conditioning::Dn(4.0),
        );
        let z0 = estimate_zf(&spec, &EnergyIntegrand::zero(), 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(z0.z.mean, 1.0);
        let f = EnergyIntegrand::entropy();
        let a = 0.4;
        let za = estimate_zf(&spec, &f, 200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let zb = estimate_zf(&spec, &f.shifted(a), 200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!((zb.z.mean - (-a).exp() * za.z.mean).abs() < 3.0 * zb.z.std_error + 1e-12);
        assert!(za.z.mean.is_finite() && za.ess > 1.0);
    }
}
