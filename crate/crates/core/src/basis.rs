//! CDF-warped trigonometric vector fields, orthonormal in `L²(ℝ^d → ℝ^d, λ)`.
//!
//! In d = 1 the fields are `√2 sin(2πj T(x))` and `√2 cos(2πj T(x))` where `T`
//! is the CDF of `λ`; orthonormality transfers from the Fourier basis on
//! `[0, 1]` through the substitution `u = T(x)`. In d = 2 the fields are
//! `e_i f_p(x₁) f_q(x₂)` with 1-d factors drawn from `{1, √2 sin, √2 cos}`.
//! Every field is bounded and C^∞ with closed-form derivatives; the certified
//! bounds below follow from `sup ρ` and `sup |ρ′|` of the marginal.
//!
//! The constant field (a translation) is not a member of the trigonometric
//! family. It can be added as mode 0 for targets that need it.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{zero, zero_matrix, zero_tensor, Matrix, Point, Tensor3};
use crate::quadrature::QuadratureGrid;
use crate::reference::ReferenceMeasure;

/// A 1-d factor `f(T(t))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    One,
    Sin(u32),
    Cos(u32),
}

impl Factor {
    fn from_index(i: usize) -> Factor {
        if i == 0 {
            Factor::One
        } else if i % 2 == 1 {
            Factor::Sin(i.div_ceil(2) as u32)
        } else {
            Factor::Cos((i / 2) as u32)
        }
    }

    pub fn frequency(&self) -> u32 {
        match *self {
            Factor::One => 0,
            Factor::Sin(j) | Factor::Cos(j) => j,
        }
    }

    /// `(f, f′, f″)` given `T(t)`, `ρ(t)` and `ρ′(t)`.
    fn eval(&self, cdf: f64, rho: f64, drho: f64) -> (f64, f64, f64) {
        match *self {
            Factor::One => (1.0, 0.0, 0.0),
            Factor::Sin(j) => {
                let w = 2.0 * PI * j as f64;
                let (s, c) = (w * cdf).sin_cos();
                (SQRT_2 * s, SQRT_2 * w * rho * c, SQRT_2 * (-w * w * rho * rho * s + w * drho * c))
            }
            Factor::Cos(j) => {
                let w = 2.0 * PI * j as f64;
                let (s, c) = (w * cdf).sin_cos();
                (SQRT_2 * c, -SQRT_2 * w * rho * s, SQRT_2 * (-w * w * rho * rho * c - w * drho * s))
            }
        }
    }

    /// Certified `(sup|f|, sup|f′|, sup|f″|)`.
    fn bounds(&self, sup_rho: f64, sup_drho: f64) -> (f64, f64, f64) {
        match *self {
            Factor::One => (1.0, 0.0, 0.0),
            Factor::Sin(j) | Factor::Cos(j) => {
                let w = 2.0 * PI * j as f64;
                (SQRT_2, SQRT_2 * w * sup_rho, SQRT_2 * (w * w * sup_rho * sup_rho + w * sup_drho))
            }
        }
    }
}

/// One basis field `e_component · Π_a factors[a](x_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec<const D: usize> {
    pub component: usize,
    pub factors: [Factor; D],
    /// Index `k` used in the Gaussian weights `a_k`, `b_k`.
    pub weight_index: u32,
}

/// Certified sup-norm bounds of one field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeBounds {
    /// `sup |φ_k|`
    pub sup: f64,
    /// `L_k ≥ ‖∇φ_k‖_∞` (operator norm)
    pub lip: f64,
    /// `M_k ≥ ‖∇²φ_k‖_∞`
    pub hess: f64,
}

/// Value, Jacobian and second derivative of a field at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const D: usize> {
    pub value: Point<D>,
    pub jac: Matrix<D>,
    pub hess: Tensor3<D>,
}

impl<const D: usize> Jet<D> {
    pub fn zero() -> Self {
        Jet { value: zero(), jac: zero_matrix(), hess: zero_tensor() }
    }
}

/// A family of vector fields indexed `0..len()`.
pub trait FieldFamily<const D: usize> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn value(&self, k: usize, x: &Point<D>) -> Point<D>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldBasis<const D: usize> {
    reference: ReferenceMeasure<D>,
    modes: Vec<ModeSpec<D>>,
    bounds: Vec<ModeBounds>,
    translation: bool,
}

/// Warped trigonometric basis with `k_max` trigonometric modes.
pub fn build_warped_trig_basis<const D: usize>(
    reference: &ReferenceMeasure<D>,
    k_max: usize,
) -> Result<VectorFieldBasis<D>> {
    VectorFieldBasis::warped_trig(reference, k_max, false)
}

impl<const D: usize> VectorFieldBasis<D> {
    /// `k_max` trigonometric modes, preceded by the `D` translations when
    /// `translation` is set.
    pub fn warped_trig(reference: &ReferenceMeasure<D>, k_max: usize, translation: bool) -> Result<Self> {
        if D != 1 && D != 2 {
            return Err(Error::UnsupportedDimension(D));
        }
        if D == 2 && !reference.is_gaussian() {
            return Err(Error::InvalidParameter {
                name: "reference",
                reason: "the d = 2 basis needs a product (Gaussian) reference".into(),
            });
        }
        let mut modes = Vec::new();
        if translation {
            for i in 0..D {
                modes.push(ModeSpec { component: i, factors: [Factor::One; D], weight_index: 0 });
            }
        }
        let mut next_k = 1u32;
        if D == 1 {
            for i in 1..=k_max {
                modes.push(ModeSpec { component: 0, factors: [Factor::from_index(i); D], weight_index: next_k });
                next_k += 1;
            }
        } else {
            // pairs of factor indices ordered by the larger frequency
            let mut level = 1u32;
            let mut trig = 0usize;
            while trig < k_max {
                let max_index = 2 * level as usize;
                for p in 0..=max_index {
                    for q in 0..=max_index {
                        let fp = Factor::from_index(p);
                        let fq = Factor::from_index(q);
                        if fp.frequency().max(fq.frequency()) != level {
                            continue;
                        }
                        for component in 0..D {
                            if trig == k_max {
                                break;
                            }
                            let mut factors = [Factor::One; D];
                            factors[0] = fp;
                            factors[1] = fq;
                            modes.push(ModeSpec { component, factors, weight_index: next_k });
                            next_k += 1;
                            trig += 1;
                        }
                    }
                }
                level += 1;
            }
        }
        let sup_rho = reference.sup_marginal_density();
        let sup_drho = reference.sup_marginal_density_deriv();
        let bounds = modes.iter().map(|m| mode_bounds(m, sup_rho, sup_drho)).collect();
        Ok(VectorFieldBasis { reference: reference.clone(), modes, bounds, translation })
    }

    pub fn reference(&self) -> &ReferenceMeasure<D> {
        &self.reference
    }

    pub fn modes(&self) -> &[ModeSpec<D>] {
        &self.modes
    }

    pub fn bounds(&self) -> &[ModeBounds] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn has_translation(&self) -> bool {
        self.translation
    }

    /// Identifier recorded next to serialized coefficients.
    pub fn id(&self) -> String {
        alloc::format!(
            "warped-trig:d={}:K={}:translation={}:{}",
            D,
            self.modes.len(),
            self.translation,
            self.reference.id()
        )
    }

    /// The same basis restricted to its first `k` modes.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.modes.len());
        VectorFieldBasis {
            reference: self.reference.clone(),
            modes: self.modes[..k].to_vec(),
            bounds: self.bounds[..k].to_vec(),
            translation: self.translation && k > 0,
        }
    }

    /// Value, Jacobian and Hessian of every mode at `x`.
    pub fn eval_all(&self, x: &Point<D>, out: &mut [Jet<D>]) {
        let mut cdf = [0.0; D];
        let mut rho = [0.0; D];
        let mut drho = [0.0; D];
        for a in 0..D {
            cdf[a] = self.reference.cdf(x[a]);
            rho[a] = self.reference.marginal_density(x[a]);
            drho[a] = self.reference.marginal_density_deriv(x[a]);
        }
        for (spec, slot) in self.modes.iter().zip(out.iter_mut()) {
            let mut f = [(0.0, 0.0, 0.0); D];
            for a in 0..D {
                f[a] = spec.factors[a].eval(cdf[a], rho[a], drho[a]);
            }
            *slot = assemble(spec.component, &f);
        }
    }

    pub fn eval_mode(&self, k: usize, x: &Point<D>) -> Jet<D> {
        let spec = &self.modes[k];
        let mut f = [(0.0, 0.0, 0.0); D];
        for a in 0..D {
            f[a] = spec.factors[a].eval(
                self.reference.cdf(x[a]),
                self.reference.marginal_density(x[a]),
                self.reference.marginal_density_deriv(x[a]),
            );
        }
        assemble(spec.component, &f)
    }

    /// `Σ c_k φ_k(x)` together with its Jacobian and Hessian.
    pub fn combine(&self, coeffs: &[f64], x: &Point<D>) -> Jet<D> {
        let mut out = Jet::zero();
        let mut cdf = [0.0; D];
        let mut rho = [0.0; D];
        let mut drho = [0.0; D];
        for a in 0..D {
            cdf[a] = self.reference.cdf(x[a]);
            rho[a] = self.reference.marginal_density(x[a]);
            drho[a] = self.reference.marginal_density_deriv(x[a]);
        }
        for (spec, &c) in self.modes.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let mut f = [(0.0, 0.0, 0.0); D];
            for a in 0..D {
                f[a] = spec.factors[a].eval(cdf[a], rho[a], drho[a]);
            }
            accumulate(&mut out, c, &assemble(spec.component, &f));
        }
        out
    }

    /// `Σ c_k φ_k(x)` only.
    pub fn combine_value(&self, coeffs: &[f64], x: &Point<D>) -> Point<D> {
        let mut cdf = [0.0; D];
        for a in 0..D {
            cdf[a] = self.reference.cdf(x[a]);
        }
        let mut out = zero::<D>();
        for (spec, &c) in self.modes.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let mut v = c;
            for a in 0..D {
                v *= spec.factors[a].eval(cdf[a], 0.0, 0.0).0;
            }
            out[spec.component] += v;
        }
        out
    }

    /// Precompute all modes on the nodes of `grid`.
    pub fn cache(&self, grid: &QuadratureGrid<D>) -> NodeCache<D> {
        let k = self.len();
        let mut values = alloc::vec![Jet::zero(); k * grid.len()];
        for (i, x) in grid.nodes().iter().enumerate() {
            self.eval_all(x, &mut values[i * k..(i + 1) * k]);
        }
        NodeCache { modes: k, values }
    }
}

impl<const D: usize> FieldFamily<D> for VectorFieldBasis<D> {
    fn len(&self) -> usize {
        self.modes.len()
    }

    fn value(&self, k: usize, x: &Point<D>) -> Point<D> {
        self.eval_mode(k, x).value
    }
}

/// Basis values on the nodes of a fixed grid, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCache<const D: usize> {
    modes: usize,
    values: Vec<Jet<D>>,
}

impl<const D: usize> NodeCache<D> {
    pub fn modes(&self) -> usize {
        self.modes
    }

    /// All modes at node `i`.
    pub fn at(&self, i: usize) -> &[Jet<D>] {
        &self.values[i * self.modes..(i + 1) * self.modes]
    }
}

pub(crate) fn accumulate<const D: usize>(out: &mut Jet<D>, c: f64, m: &Jet<D>) {
    for i in 0..D {
        out.value[i] += c * m.value[i];
        for a in 0..D {
            out.jac[i][a] += c * m.jac[i][a];
            for b in 0..D {
                out.hess[i][a][b] += c * m.hess[i][a][b];
            }
        }
    }
}

fn assemble<const D: usize>(component: usize, f: &[(f64, f64, f64); D]) -> Jet<D> {
    let mut out = Jet::zero();
    let prod_except = |skip: &[usize]| -> f64 {
        (0..D).filter(|a| !skip.contains(a)).map(|a| f[a].0).product()
    };
    out.value[component] = prod_except(&[]);
    for a in 0..D {
        out.jac[component][a] = f[a].1 * prod_except(&[a]);
        for b in 0..D {
            out.hess[component][a][b] = if a == b {
                f[a].2 * prod_except(&[a])
            } else {
                f[a].1 * f[b].1 * prod_except(&[a, b])
            };
        }
    }
    out
}

fn mode_bounds<const D: usize>(spec: &ModeSpec<D>, sup_rho: f64, sup_drho: f64) -> ModeBounds {
    let fb: Vec<(f64, f64, f64)> = spec.factors.iter().map(|f| f.bounds(sup_rho, sup_drho)).collect();
    let prod_except = |skip: &[usize]| -> f64 {
        (0..D).filter(|a| !skip.contains(a)).map(|a| fb[a].0).product()
    };
    let sup = prod_except(&[]);
    // Jacobian has one non-zero row; its operator norm is the row's length.
    let lip = (0..D).map(|a| (fb[a].1 * prod_except(&[a])).powi(2)).sum::<f64>().sqrt();
    // ‖∇²φ‖ ≤ Frobenius norm of the component Hessian
    let mut hess2 = 0.0;
    for a in 0..D {
        for b in 0..D {
            let v = if a == b { fb[a].2 * prod_except(&[a]) } else { fb[a].1 * fb[b].1 * prod_except(&[a, b]) };
            hess2 += v * v;
        }
    }
    ModeBounds { sup, lip, hess: hess2.sqrt() }
}

/// Which sup-norms enter `a_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightVariant {
    /// `a_k = (2^k L_k²) ∨ 1`
    GradientOnly,
    /// `a_k = (2^k (L_k² ∨ M_k²)) ∨ 1`
    GradientAndHessian,
}

/// Gaussian weights: coefficient `k` has law `N(0, 1/b_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussWeights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GaussWeights {
    /// `Σ_k a_k / b_k` over the truncation.
    pub fn ratio_sum(&self) -> f64 {
        self.a.iter().zip(&self.b).map(|(a, b)| a / b).sum()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.b.iter().map(|b| 1.0 / b.sqrt()).collect()
    }
}

/// Weights from certified bounds, with `b_k = a_k · 2^k`.
pub fn weights<const D: usize>(basis: &VectorFieldBasis<D>, variant: WeightVariant) -> GaussWeights {
    weights_from_bounds(
        basis.modes().iter().map(|m| m.weight_index),
        basis.bounds().iter().copied(),
        variant,
    )
}

pub fn weights_from_bounds(
    indices: impl Iterator<Item = u32>,
    bounds: impl Iterator<Item = ModeBounds>,
    variant: WeightVariant,
) -> GaussWeights {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, bd) in indices.zip(bounds) {
        let two_k = 2f64.powi(k as i32);
        let norm2 = match variant {
            WeightVariant::GradientOnly => bd.lip * bd.lip,
            WeightVariant::GradientAndHessian => (bd.lip * bd.lip).max(bd.hess * bd.hess),
        };
        let ak = (two_k * norm2).max(1.0);
        a.push(ak);
        b.push(ak * two_k);
    }
    GaussWeights { a, b }
}

/// Result of [`gram_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GramReport {
    pub matrix: Vec<Vec<f64>>,
    pub max_off_diagonal: f64,
    pub max_norm_deviation: f64,
}

/// `⟨φ_j, φ_k⟩_{L²(λ)}` for the first `k` fields of `family`.
pub fn gram_check<const D: usize, F: FieldFamily<D>>(
    family: &F,
    k: usize,
    reference: &ReferenceMeasure<D>,
    grid: &QuadratureGrid<D>,
) -> Result<GramReport> {
    if k > family.len() {
        return Err(Error::InvalidParameter {
            name: "K",
            reason: alloc::format!("K = {k} exceeds the {} available fields", family.len()),
        });
    }
    let mut matrix = alloc::vec![alloc::vec![0.0; k]; k];
    let mut vals: Vec<Point<D>> = alloc::vec![zero(); k];
    for (x, w) in grid.nodes().iter().zip(grid.weights()) {
        let wr = w * crate::reference::DensityModel::density(reference, x);
        for (j, v) in vals.iter_mut().enumerate() {
            *v = family.value(j, x);
        }
        for i in 0..k {
            for j in i..k {
                matrix[i][j] += wr * crate::linalg::dot(&vals[i], &vals[j]);
            }
        }
    }
    let mut off: f64 = 0.0;
    let mut dev: f64 = 0.0;
    for i in 0..k {
        for j in 0..i {
            matrix[i][j] = matrix[j][i];
        }
        for j in 0..k {
            if i == j {
                dev = dev.max((matrix[i][i] - 1.0).abs());
            } else {
                off = off.max(matrix[i][j].abs());
            }
        }
    }
    Ok(GramReport { matrix, max_off_diagonal: off, max_norm_deviation: dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::make_gaussian_reference;

    #[test]
    fn first_mode_lipschitz_bound() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let b = build_warped_trig_basis(&l, 4).unwrap();
        assert!((b.bounds()[0].lip - (4.0 * PI).sqrt()).abs() < 1e-12);
        assert_eq!(b.modes()[0].factors[0], Factor::Sin(1));
        assert_eq!(b.modes()[1].factors[0], Factor::Cos(1));
        assert_eq!(b.modes()[0].weight_index, 1);
    }

    #[test]
    fn gram_is_identity() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let b = build_warped_trig_basis(&l, 16).unwrap();
        let g = QuadratureGrid::default_for(&l).unwrap();
        let r = gram_check(&b, 16, &l, &g).unwrap();
        assert!(r.max_off_diagonal < 1e-6, "{}", r.max_off_diagonal);
        assert!(r.max_norm_deviation < 1e-6, "{}", r.max_norm_deviation);
        let r1 = gram_check(&b, 1, &l, &g).unwrap();
        assert_eq!(r1.max_off_diagonal, 0.0);
        assert!(gram_check(&b, 17, &l, &g).is_err());
    }

    struct Scaled<'a>(&'a VectorFieldBasis<1>);

    impl FieldFamily<1> for Scaled<'_> {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn value(&self, k: usize, x: &Point<1>) -> Point<1> {
            let v = self.0.value(k, x);
            if k == 2 {
                [1.5 * v[0]]
            } else {
                v
            }
        }
    }

    #[test]
    fn unnormalized_field_is_flagged() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let b = build_warped_trig_basis(&l, 4).unwrap();
        let g = QuadratureGrid::default_for(&l).unwrap();
        let r = gram_check(&Scaled(&b), 4, &l, &g).unwrap();
        assert!(r.max_norm_deviation > 1.0);
    }

    #[test]
    fn weights_follow_formula() {
        let unit = ModeBounds { sup: 1.0, lip: 1.0, hess: 0.0 };
        let w = weights_from_bounds(1..=6, core::iter::repeat(unit), WeightVariant::GradientOnly);
        for (k, a) in w.a.iter().enumerate() {
            assert_eq!(*a, 2f64.powi(k as i32 + 1));
        }
        let half = ModeBounds { sup: 1.0, lip: 0.5, hess: 0.0 };
        let w = weights_from_bounds(1..=1, core::iter::once(half), WeightVariant::GradientOnly);
        assert_eq!(w.a[0], 1.0);
        let w = weights_from_bounds(1..=40, core::iter::repeat(unit), WeightVariant::GradientOnly);
        assert!((w.ratio_sum() - 1.0).abs() < 1e-11);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let l = make_gaussian_reference::<2>(1.0).unwrap();
        let b = VectorFieldBasis::warped_trig(&l, 12, true).unwrap();
        let h = 1e-5;
        for k in 0..b.len() {
            let x = [0.3, -0.7];
            let m = b.eval_mode(k, &x);
            for a in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[a] += h;
                xm[a] -= h;
                let (p, q) = (b.eval_mode(k, &xp), b.eval_mode(k, &xm));
                for i in 0..2 {
                    let fd = (p.value[i] - q.value[i]) / (2.0 * h);
                    assert!((fd - m.jac[i][a]).abs() < 1e-7, "mode {k}");
                    for c in 0..2 {
                        let fd2 = (p.jac[i][c] - q.jac[i][c]) / (2.0 * h);
                        assert!((fd2 - m.hess[i][a][c]).abs() < 1e-6, "mode {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn certified_bounds_dominate_sampled_values() {
        let l = make_gaussian_reference::<1>(0.7).unwrap();
        let b = build_warped_trig_basis(&l, 12).unwrap();
        let n = 100_000;
        for i in 0..n {
            let x = [-8.0 + 16.0 * i as f64 / (n - 1) as f64];
            for k in 0..b.len() {
                let m = b.eval_mode(k, &x);
                let bd = b.bounds()[k];
                assert!(m.value[0].abs() <= bd.sup + 1e-12);
                assert!(m.jac[0][0].abs() <= bd.lip + 1e-12);
                assert!(m.hess[0][0][0].abs() <= bd.hess + 1e-12);
            }
        }
    }

    #[test]
    fn two_dimensional_gram() {
        let l = make_gaussian_reference::<2>(1.0).unwrap();
        let b = build_warped_trig_basis(&l, 12).unwrap();
        let g = QuadratureGrid::for_reference(&l, 160).unwrap();
        let r = gram_check(&b, 12, &l, &g).unwrap();
        assert!(r.max_off_diagonal < 1e-6 && r.max_norm_deviation < 1e-6, "{r:?}");
    }
}
