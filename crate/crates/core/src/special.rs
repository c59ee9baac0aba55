//! Standard normal distribution functions and small scalar helpers.

use core::f64::consts::{PI, SQRT_2};
#[allow(unused_imports)]
use num_traits::Float;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `Φ(z)`, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `1 − Φ(z)` without cancellation.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// `Φ⁻¹(u)` for `u ∈ (0, 1)`.
///
/// Acklam's rational approximation followed by one Halley step against
/// `erfc`, which brings the relative error to a few ulps.
pub fn normal_quantile(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const DD: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;
    let x = if u < LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((DD[0] * q + DD[1]) * q + DD[2]) * q + DD[3]) * q + 1.0)
    } else if u <= 1.0 - LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((DD[0] * q + DD[1]) * q + DD[2]) * q + DD[3]) * q + 1.0)
    };
    // Halley refinement; use the tail that avoids cancellation.
    let mut x = x;
    for _ in 0..2 {
        let e = if x < 0.0 {
            normal_cdf(x) - u
        } else {
            (1.0 - u) - normal_sf(x)
        };
        let g = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        let step = g / (1.0 + 0.5 * x * g);
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

/// Normalized smooth bump `τ(w) ∝ exp(−1/(1−w²))` on `(−1, 1)`, 1-d.
pub fn bump_unnormalized(w: f64) -> f64 {
    let r = 1.0 - w * w;
    if r <= 0.0 {
        0.0
    } else {
        (-1.0 / r).exp()
    }
}

/// Derivative of [`bump_unnormalized`].
pub fn bump_unnormalized_deriv(w: f64) -> f64 {
    let r = 1.0 - w * w;
    if r <= 0.0 {
        0.0
    } else {
        (-1.0 / r).exp() * (-2.0 * w / (r * r))
    }
}

/// `∫_{−1}^{1} exp(−1/(1−w²)) dw`.
pub const BUMP_MASS: f64 = 0.443_993_816_168_079_4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            let z = normal_quantile(u);
            assert!((normal_cdf(z) - u).abs() < 1e-15, "u = {u}");
        }
        for i in 0..1000 {
            let z = -8.0 + 16.0 * i as f64 / 999.0;
            let back = normal_quantile(normal_cdf(z));
            if z.abs() <= 5.0 {
                assert!((back - z).abs() < 1e-10, "z = {z}, back = {back}");
            }
        }
    }

    #[test]
    fn bump_mass_constant() {
        let n = 20_000;
        let h = 2.0 / n as f64;
        let s: f64 = (1..n).map(|i| bump_unnormalized(-1.0 + i as f64 * h)).sum::<f64>() * h;
        assert!((s - BUMP_MASS).abs() < 1e-12, "{s}");
    }
}
