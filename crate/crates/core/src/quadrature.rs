//! Tensor-product trapezoid quadrature on axis-aligned boxes.

use alloc::vec::Vec;

use crate::error::{fmt_point, Error, Result};
use crate::linalg::Point;
use crate::reference::{DensityModel, ReferenceMeasure};

pub const DEFAULT_NODES_1D: usize = 2048;
pub const DEFAULT_NODES_2D: usize = 256;

/// Axis-aligned box `Π [lo_i, hi_i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<const D: usize> {
    pub lo: Point<D>,
    pub hi: Point<D>,
}

impl<const D: usize> Window<D> {
    pub fn symmetric(half_width: f64) -> Self {
        Window { lo: [-half_width; D], hi: [half_width; D] }
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &Point<D>) -> bool {
        (0..D).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

/// How an integrand is weighted.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a, const D: usize> {
    /// `∫ f dx`
    Lebesgue,
    /// `∫ f dλ`
    Reference(&'a ReferenceMeasure<D>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid<const D: usize> {
    window: Window<D>,
    per_axis: usize,
    nodes: Vec<Point<D>>,
    weights: Vec<f64>,
}

impl<const D: usize> QuadratureGrid<D> {
    /// `per_axis` equispaced nodes per axis including the endpoints.
    pub fn new(window: Window<D>, per_axis: usize) -> Result<Self> {
        if per_axis < 2 {
            return Err(Error::InvalidParameter { name: "per_axis", reason: "need at least 2 nodes".into() });
        }
        for i in 0..D {
            if !(window.hi[i] > window.lo[i]) {
                return Err(Error::InvalidParameter { name: "window", reason: "empty box".into() });
            }
        }
        let mut axes_x: Vec<Vec<f64>> = Vec::with_capacity(D);
        let mut axes_w: Vec<Vec<f64>> = Vec::with_capacity(D);
        for i in 0..D {
            let (lo, hi) = (window.lo[i], window.hi[i]);
            let h = (hi - lo) / (per_axis - 1) as f64;
            let xs: Vec<f64> = (0..per_axis).map(|j| lo + j as f64 * h).collect();
            let ws: Vec<f64> = (0..per_axis)
                .map(|j| if j == 0 || j == per_axis - 1 { 0.5 * h } else { h })
                .collect();
            axes_x.push(xs);
            axes_w.push(ws);
        }
        let total = per_axis.pow(D as u32);
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = [0.0; D];
            let mut w = 1.0;
            for a in (0..D).rev() {
                let j = rem % per_axis;
                rem /= per_axis;
                p[a] = axes_x[a][j];
                w *= axes_w[a][j];
            }
            nodes.push(p);
            weights.push(w);
        }
        Ok(QuadratureGrid { window, per_axis, nodes, weights })
    }

    /// Grid on the reference measure's window.
    pub fn for_reference(reference: &ReferenceMeasure<D>, per_axis: usize) -> Result<Self> {
        Self::new(Window::symmetric(reference.window_half_width()), per_axis)
    }

    /// Default resolution: 2048 nodes in d = 1, 256² in d = 2.
    pub fn default_for(reference: &ReferenceMeasure<D>) -> Result<Self> {
        let n = if D == 1 { DEFAULT_NODES_1D } else { DEFAULT_NODES_2D };
        Self::for_reference(reference, n)
    }

    /// Halve the spacing; the old nodes are a subset of the new ones.
    pub fn refined(&self) -> Result<Self> {
        Self::new(self.window, 2 * self.per_axis - 1)
    }

    pub fn window(&self) -> &Window<D> {
        &self.window
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn spacing(&self) -> Point<D> {
        let mut h = [0.0; D];
        for (i, v) in h.iter_mut().enumerate() {
            *v = (self.window.hi[i] - self.window.lo[i]) / (self.per_axis - 1) as f64;
        }
        h
    }

    pub fn nodes(&self) -> &[Point<D>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ wᵢ f(xᵢ)` (Lebesgue) or `Σ wᵢ ρ_λ(xᵢ) f(xᵢ)` (reference).
    pub fn integrate<F>(&self, weighting: Weighting<'_, D>, mut f: F) -> Result<f64>
    where
        F: FnMut(&Point<D>) -> f64,
    {
        let mut acc = 0.0;
        for (i, (x, w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { index: i, point: fmt_point(x), value: v });
            }
            let factor = match weighting {
                Weighting::Lebesgue => 1.0,
                Weighting::Reference(r) => r.density(x),
            };
            acc += w * factor * v;
        }
        Ok(acc)
    }
}

/// `∫ f dλ` on the given grid.
pub fn integrate<const D: usize, F>(reference: &ReferenceMeasure<D>, f: F, grid: &QuadratureGrid<D>) -> Result<f64>
where
    F: FnMut(&Point<D>) -> f64,
{
    grid.integrate(Weighting::Reference(reference), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::make_gaussian_reference;

    #[test]
    fn weights_sum_to_volume() {
        let g = QuadratureGrid::<2>::new(Window { lo: [-1.0, 0.0], hi: [2.0, 0.5] }, 33).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.5).abs() < 1e-12 * 1.5);
    }

    #[test]
    fn standard_normal_moments() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let g = QuadratureGrid::default_for(&l).unwrap();
        let mass = integrate(&l, |_| 1.0, &g).unwrap();
        assert!(mass <= 1.0 + 1e-14 && mass >= 1.0 - l.tail());
        let m2 = integrate(&l, |x| x[0] * x[0], &g).unwrap();
        assert!((m2 - 1.0).abs() < 1e-6);
        let ent = integrate(&l, |x| l.log_density(x), &g).unwrap();
        let expect = -0.5 * (2.0 * core::f64::consts::PI).ln() - 0.5;
        assert!((ent - expect).abs() < 1e-6, "{ent} vs {expect}");
    }

    #[test]
    fn non_finite_integrand_names_node() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let g = QuadratureGrid::for_reference(&l, 11).unwrap();
        let err = integrate(&l, |x| if x[0].abs() < 1e-9 { f64::NAN } else { 1.0 }, &g).unwrap_err();
        match err {
            Error::NonFiniteIntegrand { index, .. } => assert_eq!(index, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refinement_is_stable_and_second_order() {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        let g = QuadratureGrid::default_for(&l).unwrap();
        let a = integrate(&l, |_| 1.0, &g).unwrap();
        let b = integrate(&l, |_| 1.0, &g.refined().unwrap()).unwrap();
        assert!((a - b).abs() < 1e-8);

        // a non-decaying integrand on a finite box shows the h² rate of the rule
        let w = Window::<1> { lo: [0.0], hi: [1.0] };
        let exact = 1.0 - (-1.0f64).exp();
        let coarse = QuadratureGrid::new(w, 17).unwrap();
        let fine = coarse.refined().unwrap();
        let e1 = (coarse.integrate(Weighting::Lebesgue, |x| (-x[0]).exp()).unwrap() - exact).abs();
        let e2 = (fine.integrate(Weighting::Lebesgue, |x| (-x[0]).exp()).unwrap() - exact).abs();
        assert!(e1 / e2 >= 3.9, "ratio {}", e1 / e2);
    }
}
