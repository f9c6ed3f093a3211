use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use super::cg::clebsch_gordan;
use super::L_MAX;
use crate::error::{Error, Result};

/// An element of O(3) written as a proper rotation optionally followed by inversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationParity {
    rotation: Matrix3<f64>,
    inversion: bool,
}

impl RotationParity {
    pub fn new(rotation: Matrix3<f64>, inversion: bool) -> Result<Self> {
        let dev = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if dev >= 1e-12 {
            return Err(Error::Domain(format!(
                "rotation is not orthogonal (max deviation {dev:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= 1e-12 {
            return Err(Error::Domain(format!("rotation determinant {det} != 1")));
        }
        Ok(RotationParity {
            rotation,
            inversion,
        })
    }

    pub fn identity() -> Self {
        RotationParity {
            rotation: Matrix3::identity(),
            inversion: false,
        }
    }

    pub fn inversion() -> Self {
        RotationParity {
            rotation: Matrix3::identity(),
            inversion: true,
        }
    }

    /// Rotation by `angle` about the unit `axis` (Rodrigues).
    pub fn axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let a = nalgebra::Vector3::from(axis).normalize();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        let r = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        RotationParity {
            rotation: r,
            inversion: false,
        }
    }

    /// Uniform random rotation from three uniforms in [0, 1) (Shoemake quaternion).
    pub fn from_uniforms(u: [f64; 3], inversion: bool) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        let (a, b) = ((1.0 - u[0]).sqrt(), u[0].sqrt());
        let q = [
            a * (tau * u[1]).sin(),
            a * (tau * u[1]).cos(),
            b * (tau * u[2]).sin(),
            b * (tau * u[2]).cos(),
        ];
        let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
        let r = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        );
        RotationParity {
            rotation: r,
            inversion,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn has_inversion(&self) -> bool {
        self.inversion
    }

    /// The full 3x3 orthogonal matrix (with determinant -1 under inversion).
    pub fn matrix(&self) -> Matrix3<f64> {
        if self.inversion {
            -self.rotation
        } else {
            self.rotation
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RotationParity) -> RotationParity {
        RotationParity {
            rotation: self.rotation * other.rotation,
            inversion: self.inversion ^ other.inversion,
        }
    }

    pub fn inverse(&self) -> RotationParity {
        RotationParity {
            rotation: self.rotation.transpose(),
            inversion: self.inversion,
        }
    }
}

/// l = 1 representation: the Cartesian rotation in (y, z, x) order.
fn d1(r: &Matrix3<f64>) -> DMatrix<f64> {
    // row a of the permuted basis picks Cartesian axis perm[a]
    const PERM: [usize; 3] = [1, 2, 0];
    DMatrix::from_fn(3, 3, |a, b| r[(PERM[a], PERM[b])])
}

/// Rotation part of the degree-`l` real Wigner matrix, built recursively by
/// projecting `D(l-1) ⊗ D(1)` onto its degree-`l` component.
pub fn wigner_d_rotation(l: usize, r: &Matrix3<f64>) -> Result<DMatrix<f64>> {
    if l > L_MAX {
        return Err(Error::Capability(format!("degree {l} exceeds l_max = {L_MAX}")));
    }
    if l == 0 || *r == Matrix3::identity() {
        return Ok(DMatrix::identity(2 * l + 1, 2 * l + 1));
    }
    let one = d1(r);
    let mut d = one.clone();
    for ll in 2..=l {
        let cg = clebsch_gordan(ll - 1, 1, ll)?;
        let prod = d.kronecker(&one);
        // C as a ((2ll-1)*3) x (2ll+1) matrix with row index m1*3 + m2
        let (d_a, d_b, d_c) = cg.dims();
        let c = DMatrix::from_fn(d_a * d_b, d_c, |row, col| cg.get(row / d_b, row % d_b, col));
        d = c.transpose() * prod * c;
    }
    Ok(d)
}

/// Real Wigner matrix for harmonic-parity behavior: inversion contributes `(-1)^l`.
pub fn wigner_d(l: usize, rp: &RotationParity) -> Result<DMatrix<f64>> {
    let mut d = wigner_d_rotation(l, &rp.rotation)?;
    if rp.inversion && l % 2 == 1 {
        d.neg_mut();
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::sph::real_sph_harm;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rp(rng: &mut ChaCha8Rng) -> RotationParity {
        RotationParity::from_uniforms([rng.gen(), rng.gen(), rng.gen()], rng.gen())
    }

    #[test]
    fn degree_zero_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = wigner_d(0, &random_rp(&mut rng)).unwrap();
        assert_eq!(d, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn z_rotation_in_yzx_order() {
        let th: f64 = 0.7;
        let rp = RotationParity::axis_angle([0.0, 0.0, 1.0], th);
        let d = wigner_d(1, &rp).unwrap();
        // oracle: Cartesian Rz conjugated by the (y, z, x) permutation
        let (c, s) = (th.cos(), th.sin());
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let p = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
        let expected = p * rz * p.transpose();
        for a in 0..3 {
            for b in 0..3 {
                assert!((d[(a, b)] - expected[(a, b)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthogonal_homomorphic_and_moves_harmonics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (r1, r2) = (random_rp(&mut rng), random_rp(&mut rng));
            let v = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                .normalize();
            for l in 0..=L_MAX {
                let a = wigner_d(l, &r1).unwrap();
                let b = wigner_d(l, &r2).unwrap();
                let ab = wigner_d(l, &r1.compose(&r2)).unwrap();
                let n = 2 * l + 1;
                assert!((&a * a.transpose() - DMatrix::identity(n, n)).amax() < 1e-10);
                assert!((&a * &b - ab).amax() < 1e-10);
                let y = DMatrix::from_vec(n, 1, real_sph_harm(l, &v).unwrap());
                let rv = r1.matrix() * v;
                let yr = DMatrix::from_vec(n, 1, real_sph_harm(l, &rv).unwrap());
                assert!((&a * y - yr).amax() < 1e-10, "l = {l}");
            }
        }
    }

    #[test]
    fn rejects_improper_matrices() {
        assert!(RotationParity::new(-Matrix3::identity(), false).is_err());
        assert!(RotationParity::new(Matrix3::identity() * 1.01, false).is_err());
    }
}
