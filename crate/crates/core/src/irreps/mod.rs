//! O(3) representation algebra: real spherical harmonics, real Wigner D
//! matrices, Clebsch-Gordan coupling and direct-sum feature containers.
//!
//! One basis convention is shared by everything downstream (harmonics, D
//! matrices, orbital blocks of Hamiltonians): `m = -l..=l`, with the `l = 1`
//! triple ordered as Cartesian `(y, z, x)`.

mod cg;
mod spec;
mod sph;
mod tp;
mod wigner;

pub use cg::{clebsch_gordan, triangle, CgTensor};
pub use spec::{Irrep, IrrepArray, IrrepEntry, IrrepSpec, Parity};
pub use sph::{real_sph_harm, sph_harm_upto};
pub use tp::{TensorProduct, TpPath};
pub use wigner::{wigner_d, wigner_d_rotation, RotationParity};

/// Highest supported degree.
pub const L_MAX: usize = 6;

/// Apply an O(3) element to a feature vector: every `(l, parity)` block is
/// rotated by `D(l)` and flipped when the element inverts and the parity is odd.
pub fn transform(x: &IrrepArray, rp: &RotationParity) -> IrrepArray {
    let spec = x.spec().clone();
    let mut out = IrrepArray::zeros(spec.clone());
    let mut cache: Vec<Option<nalgebra::DMatrix<f64>>> = vec![None; L_MAX + 1];
    for (k, e) in spec.entries().iter().enumerate() {
        let l = e.irrep.l;
        let d = cache[l].get_or_insert_with(|| {
            wigner_d_rotation(l, rp.rotation()).expect("spec degrees are within l_max")
        });
        let sign = if rp.has_inversion() { e.irrep.parity.sign() } else { 1.0 };
        for c in 0..e.mul {
            let src = x.block(k, c);
            let dst = out.block_mut(k, c);
            for (a, o) in dst.iter_mut().enumerate() {
                *o = sign * (0..src.len()).map(|b| d[(a, b)] * src[b]).sum::<f64>();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_array(spec: &IrrepSpec, rng: &mut ChaCha8Rng) -> IrrepArray {
        let data = (0..spec.dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        IrrepArray::new(spec.clone(), data).unwrap()
    }

    fn random_rp(rng: &mut ChaCha8Rng) -> RotationParity {
        RotationParity::from_uniforms([rng.gen(), rng.gen(), rng.gen()], rng.gen())
    }

    #[test]
    fn identity_and_even_inversion_are_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec: IrrepSpec = "3x0e+2x1o+2x2e".parse().unwrap();
        let x = random_array(&spec, &mut rng);
        assert_eq!(transform(&x, &RotationParity::identity()), x);
        let even: IrrepSpec = "2x0e+2x1e+1x2e".parse().unwrap();
        let y = random_array(&even, &mut rng);
        assert_eq!(transform(&y, &RotationParity::inversion()), y);
    }

    #[test]
    fn transform_preserves_block_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec: IrrepSpec = "4x0e+2x1e+2x1o+2x2e+2x2o+1x3o+1x4e+1x5o+1x6e".parse().unwrap();
        for _ in 0..20 {
            let x = random_array(&spec, &mut rng);
            let y = transform(&x, &random_rp(&mut rng));
            for (a, b) in x.block_norms().iter().zip(y.block_norms()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cg_intertwines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let rp = random_rp(&mut rng);
            for l1 in 0..=L_MAX {
                for l2 in 0..=L_MAX {
                    for l3 in 0..=L_MAX {
                        if !triangle(l1, l2, l3) {
                            continue;
                        }
                        let c = clebsch_gordan(l1, l2, l3).unwrap();
                        let d1 = wigner_d_rotation(l1, rp.rotation()).unwrap();
                        let d2 = wigner_d_rotation(l2, rp.rotation()).unwrap();
                        let d3 = wigner_d_rotation(l3, rp.rotation()).unwrap();
                        let x: Vec<f64> = (0..2 * l1 + 1).map(|_| rng.gen::<f64>() - 0.5).collect();
                        let y: Vec<f64> = (0..2 * l2 + 1).map(|_| rng.gen::<f64>() - 0.5).collect();
                        let rx: Vec<f64> = (0..x.len())
                            .map(|a| (0..x.len()).map(|b| d1[(a, b)] * x[b]).sum())
                            .collect();
                        let ry: Vec<f64> = (0..y.len())
                            .map(|a| (0..y.len()).map(|b| d2[(a, b)] * y[b]).sum())
                            .collect();
                        let mut lhs = vec![0.0; 2 * l3 + 1];
                        c.couple_into(&rx, &ry, 1.0, &mut lhs);
                        let mut z = vec![0.0; 2 * l3 + 1];
                        c.couple_into(&x, &y, 1.0, &mut z);
                        for a in 0..z.len() {
                            let rhs: f64 = (0..z.len()).map(|b| d3[(a, b)] * z[b]).sum();
                            assert!((lhs[a] - rhs).abs() < 1e-10, "({l1},{l2},{l3})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_product_scalars_and_zero_weights() {
        let s: IrrepSpec = "1x0e".parse().unwrap();
        let tp = TensorProduct::new(s.clone(), s.clone(), s.clone()).unwrap();
        let x = IrrepArray::new(s.clone(), vec![3.0]).unwrap();
        let y = IrrepArray::new(s.clone(), vec![-2.0]).unwrap();
        assert_eq!(tp.apply(&x, &y, &[1.0]).unwrap().data(), &[-6.0]);
        assert_eq!(tp.apply(&x, &y, &[0.0]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn tensor_product_vector_vector_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: IrrepSpec = "1x1e".parse().unwrap();
        let out: IrrepSpec = "1x0e+1x1e+1x2e".parse().unwrap();
        let tp = TensorProduct::new(v.clone(), v.clone(), out).unwrap();
        let w: Vec<f64> = (0..tp.num_weights()).map(|_| rng.gen::<f64>() - 0.5).collect();
        for _ in 0..10 {
            let (x, y) = (random_array(&v, &mut rng), random_array(&v, &mut rng));
            let rp = random_rp(&mut rng);
            let a = transform(&tp.apply(&x, &y, &w).unwrap(), &rp);
            let b = tp.apply(&transform(&x, &rp), &transform(&y, &rp), &w).unwrap();
            assert_eq!(a.data().len(), 9);
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tensor_product_unreachable_output() {
        let v: IrrepSpec = "1x1e".parse().unwrap();
        let out: IrrepSpec = "1x0e+1x1o".parse().unwrap();
        let err = TensorProduct::new(v.clone(), v, out).unwrap_err();
        assert!(err.to_string().contains("1o"), "{err}");
    }
}
