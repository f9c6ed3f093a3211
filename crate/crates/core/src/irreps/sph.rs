//! Real spherical harmonics.
//!
//! Orthonormal on the unit sphere, no Condon-Shortley phase, `m = -l..=l`.
//! With this convention the `l = 1` triple is proportional to `(y, z, x)`.

use std::f64::consts::PI;

use nalgebra::Vector3;

use super::L_MAX;
use crate::error::{Error, Result};

/// Real spherical harmonics of degree `l` at a unit `direction`.
pub fn real_sph_harm(l: usize, direction: &Vector3<f64>) -> Result<Vec<f64>> {
    if l > L_MAX {
        return Err(Error::Capability(format!("degree {l} exceeds l_max = {L_MAX}")));
    }
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-10 || !n.is_finite() {
        return Err(Error::Domain(format!("direction has norm {n}, expected 1")));
    }
    let mut out = vec![0.0; 2 * l + 1];
    eval_degree(l, direction, &mut out);
    Ok(out)
}

/// All degrees `0..=lmax` concatenated. A zero vector yields only the constant `l = 0`
/// term; otherwise the vector is normalized first.
pub fn sph_harm_upto(lmax: usize, v: &Vector3<f64>) -> Vec<f64> {
    assert!(lmax <= L_MAX);
    let mut out = vec![0.0; (lmax + 1) * (lmax + 1)];
    let n = v.norm();
    if n < 1e-12 {
        out[0] = 0.5 / PI.sqrt();
        return out;
    }
    let u = v / n;
    for l in 0..=lmax {
        eval_degree(l, &u, &mut out[l * l..(l + 1) * (l + 1)]);
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn eval_degree(l: usize, u: &Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (u.x, u.y, u.z);
    // (x + iy)^m by repeated multiplication
    let mut cos_m = vec![1.0; l + 1];
    let mut sin_m = vec![0.0; l + 1];
    for m in 1..=l {
        cos_m[m] = cos_m[m - 1] * x - sin_m[m - 1] * y;
        sin_m[m] = sin_m[m - 1] * x + cos_m[m - 1] * y;
    }
    for m in 0..=l {
        let q = legendre_derivative(l, m, z);
        let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - m) / factorial(l + m)).sqrt();
        if m == 0 {
            out[l] = norm * q;
        } else {
            let s2 = std::f64::consts::SQRT_2;
            out[l + m] = s2 * norm * q * cos_m[m];
            out[l - m] = s2 * norm * q * sin_m[m];
        }
    }
}

/// `d^m P_l(z) / dz^m` via the standard upward recurrence in `l`.
fn legendre_derivative(l: usize, m: usize, z: f64) -> f64 {
    // Q_m^m = (2m-1)!!
    let mut qmm = 1.0;
    for k in 1..=m {
        qmm *= (2 * k - 1) as f64;
    }
    if l == m {
        return qmm;
    }
    let mut q_prev = qmm;
    let mut q = (2 * m + 1) as f64 * z * qmm;
    for ll in (m + 2)..=l {
        let next = ((2 * ll - 1) as f64 * z * q - (ll + m - 1) as f64 * q_prev) / (ll - m) as f64;
        q_prev = q;
        q = next;
    }
    q
}
