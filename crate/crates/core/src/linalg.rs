//! Fixed-size vectors and matrices for `d ∈ {1, 2}`.

#[allow(unused_imports)]
use num_traits::Float;

/// A point (or vector) in `ℝ^D`.
pub type Point<const D: usize> = [f64; D];
/// `m[i][j] = ∂_j f_i`.
pub type Matrix<const D: usize> = [[f64; D]; D];
/// `t[i][a][b] = ∂_a ∂_b f_i`.
pub type Tensor3<const D: usize> = [[[f64; D]; D]; D];

pub fn zero<const D: usize>() -> Point<D> {
    [0.0; D]
}

pub fn zero_matrix<const D: usize>() -> Matrix<D> {
    [[0.0; D]; D]
}

pub fn zero_tensor<const D: usize>() -> Tensor3<D> {
    [[[0.0; D]; D]; D]
}

pub fn identity<const D: usize>() -> Matrix<D> {
    let mut m = zero_matrix::<D>();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn dot<const D: usize>(a: &Point<D>, b: &Point<D>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm<const D: usize>(a: &Point<D>) -> f64 {
    dot(a, a).sqrt()
}

pub fn add<const D: usize>(a: &Point<D>, b: &Point<D>) -> Point<D> {
    let mut out = *a;
    for (o, v) in out.iter_mut().zip(b) {
        *o += v;
    }
    out
}

pub fn sub<const D: usize>(a: &Point<D>, b: &Point<D>) -> Point<D> {
    let mut out = *a;
    for (o, v) in out.iter_mut().zip(b) {
        *o -= v;
    }
    out
}

pub fn sub_matrix<const D: usize>(a: &Matrix<D>, b: &Matrix<D>) -> Matrix<D> {
    let mut out = *a;
    for i in 0..D {
        for j in 0..D {
            out[i][j] -= b[i][j];
        }
    }
    out
}

pub fn scale<const D: usize>(a: &Point<D>, s: f64) -> Point<D> {
    let mut out = *a;
    for o in out.iter_mut() {
        *o *= s;
    }
    out
}

pub fn mat_vec<const D: usize>(m: &Matrix<D>, v: &Point<D>) -> Point<D> {
    let mut out = zero::<D>();
    for i in 0..D {
        out[i] = dot(&m[i], v);
    }
    out
}

/// `mᵀ v`.
pub fn mat_t_vec<const D: usize>(m: &Matrix<D>, v: &Point<D>) -> Point<D> {
    let mut out = zero::<D>();
    for j in 0..D {
        for i in 0..D {
            out[j] += m[i][j] * v[i];
        }
    }
    out
}

pub fn mat_mul<const D: usize>(a: &Matrix<D>, b: &Matrix<D>) -> Matrix<D> {
    let mut out = zero_matrix::<D>();
    for i in 0..D {
        for j in 0..D {
            for k in 0..D {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn det<const D: usize>(m: &Matrix<D>) -> f64 {
    match D {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => unreachable!("only d <= 2 is supported"),
    }
}

/// Inverse of an invertible matrix; `None` when the determinant vanishes.
pub fn inverse<const D: usize>(m: &Matrix<D>) -> Option<Matrix<D>> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = zero_matrix::<D>();
    match D {
        1 => out[0][0] = 1.0 / d,
        2 => {
            out[0][0] = m[1][1] / d;
            out[0][1] = -m[0][1] / d;
            out[1][0] = -m[1][0] / d;
            out[1][1] = m[0][0] / d;
        }
        _ => unreachable!("only d <= 2 is supported"),
    }
    Some(out)
}

pub fn trace<const D: usize>(m: &Matrix<D>) -> f64 {
    (0..D).map(|i| m[i][i]).sum()
}

/// Spectral norm (largest singular value).
pub fn op_norm<const D: usize>(m: &Matrix<D>) -> f64 {
    match D {
        1 => m[0][0].abs(),
        2 => {
            // singular values of a 2x2 matrix from the invariants of mᵀm
            let fro2 = m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1];
            let d = det(m);
            let disc = (fro2 * fro2 - 4.0 * d * d).max(0.0).sqrt();
            ((fro2 + disc) / 2.0).sqrt()
        }
        _ => unreachable!("only d <= 2 is supported"),
    }
}

/// Smallest singular value.
pub fn min_singular<const D: usize>(m: &Matrix<D>) -> f64 {
    match D {
        1 => m[0][0].abs(),
        2 => {
            let big = op_norm(m);
            if big == 0.0 {
                0.0
            } else {
                det(m).abs() / big
            }
        }
        _ => unreachable!("only d <= 2 is supported"),
    }
}

/// Gradient of `x ↦ det J(x)` by Jacobi's formula,
/// `∂_a det J = det J · tr(J⁻¹ ∂_a J)`, with `hess[i][a][b] = ∂_a J_{ib}`.
pub fn grad_det<const D: usize>(jac: &Matrix<D>, hess: &Tensor3<D>) -> Point<D> {
    let mut out = zero::<D>();
    match D {
        1 => out[0] = hess[0][0][0],
        2 => {
            // adjugate form avoids dividing by det
            for a in 0..D {
                let d00 = hess[0][a][0];
                let d01 = hess[0][a][1];
                let d10 = hess[1][a][0];
                let d11 = hess[1][a][1];
                out[a] = d00 * jac[1][1] + jac[0][0] * d11 - d01 * jac[1][0] - jac[0][1] * d10;
            }
        }
        _ => unreachable!("only d <= 2 is supported"),
    }
    out
}

/// Solve `m x = b`.
pub fn solve<const D: usize>(m: &Matrix<D>, b: &Point<D>) -> Option<Point<D>> {
    inverse(m).map(|inv| mat_vec(&inv, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_norm_of_diagonal() {
        let m = [[3.0, 0.0], [0.0, -0.5]];
        assert!((op_norm(&m) - 3.0).abs() < 1e-14);
        assert!((min_singular(&m) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn jacobi_formula_matches_direct_derivative() {
        // J(x) = [[1 + x a, b x], [c x, 1 + x e]] at x along direction 0
        let jac = [[1.2, 0.3], [-0.1, 0.9]];
        let mut hess = zero_tensor::<2>();
        hess[0][0][0] = 0.5;
        hess[0][0][1] = 0.2;
        hess[1][0][0] = -0.7;
        hess[1][0][1] = 0.4;
        let g = grad_det(&jac, &hess);
        let h = 1e-6;
        let jp = [[1.2 + h * 0.5, 0.3 + h * 0.2], [-0.1 - h * 0.7, 0.9 + h * 0.4]];
        let jm = [[1.2 - h * 0.5, 0.3 - h * 0.2], [-0.1 + h * 0.7, 0.9 - h * 0.4]];
        let fd = (det(&jp) - det(&jm)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-9);
    }
}
