//! Real-basis Clebsch-Gordan coupling tensors.
//!
//! Each tensor is the (one-dimensional) solution of the intertwining constraint
//! `(D1 ⊗ D2) C = C D3` in the real harmonic basis of [`super::sph`]. It is
//! obtained from the Racah closed form in the complex basis followed by the
//! unitary change to real harmonics, then fixed in sign so the first nonzero
//! component is positive. Columns (one per `m3`) are orthonormal.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;

use super::L_MAX;
use crate::error::{Error, Result};

/// Dense `(2l1+1) x (2l2+1) x (2l3+1)` tensor plus its nonzero pattern.
#[derive(Debug, Clone)]
pub struct CgTensor {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    data: Vec<f64>,
    nonzeros: Vec<(usize, usize, usize, f64)>,
}

impl CgTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        (2 * self.l1 + 1, 2 * self.l2 + 1, 2 * self.l3 + 1)
    }

    pub fn get(&self, m1: usize, m2: usize, m3: usize) -> f64 {
        let (_, d2, d3) = self.dims();
        self.data[(m1 * d2 + m2) * d3 + m3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `(m1, m2, m3, value)` for every entry with |value| > 1e-14.
    pub fn nonzeros(&self) -> &[(usize, usize, usize, f64)] {
        &self.nonzeros
    }

    /// `out[m3] += scale * Σ C[m1,m2,m3] x[m1] y[m2]`.
    pub fn couple_into(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        for &(a, b, c, v) in &self.nonzeros {
            out[c] += scale * v * x[a] * y[b];
        }
    }
}

pub fn triangle(l1: usize, l2: usize, l3: usize) -> bool {
    l3 + l1.min(l2) >= l1.max(l2) && l3 <= l1 + l2
}

type Table = Vec<Option<Arc<CgTensor>>>;

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = L_MAX + 1;
        let mut t = Vec::with_capacity(n * n * n);
        for l1 in 0..n {
            for l2 in 0..n {
                for l3 in 0..n {
                    t.push(triangle(l1, l2, l3).then(|| Arc::new(build(l1, l2, l3))));
                }
            }
        }
        t
    })
}

/// Cached real coupling tensor for `l1 ⊗ l2 -> l3`.
pub fn clebsch_gordan(l1: usize, l2: usize, l3: usize) -> Result<Arc<CgTensor>> {
    if l1.max(l2).max(l3) > L_MAX {
        return Err(Error::Capability(format!(
            "degrees ({l1}, {l2}, {l3}) exceed l_max = {L_MAX}"
        )));
    }
    if !triangle(l1, l2, l3) {
        return Err(Error::Domain(format!(
            "triangle rule violated for ({l1}, {l2}, {l3})"
        )));
    }
    let n = L_MAX + 1;
    Ok(table()[(l1 * n + l2) * n + l3]
        .clone()
        .expect("triangle-valid entries are populated"))
}

fn factorial(n: i64) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Complex Clebsch-Gordan coefficient ⟨l1 m1 l2 m2 | l3 m3⟩ (Condon-Shortley phases).
fn complex_cg(l1: i64, m1: i64, l2: i64, m2: i64, l3: i64, m3: i64) -> f64 {
    if m1 + m2 != m3 {
        return 0.0;
    }
    let pre = ((2 * l3 + 1) as f64 * factorial(l3 + l1 - l2) * factorial(l3 - l1 + l2)
        * factorial(l1 + l2 - l3)
        / factorial(l1 + l2 + l3 + 1))
        .sqrt();
    let pre = pre
        * (factorial(l3 + m3)
            * factorial(l3 - m3)
            * factorial(l1 - m1)
            * factorial(l1 + m1)
            * factorial(l2 - m2)
            * factorial(l2 + m2))
            .sqrt();
    let mut sum = 0.0;
    for k in 0..=(l1 + l2 - l3) {
        let terms = [
            l1 + l2 - l3 - k,
            l1 - m1 - k,
            l2 + m2 - k,
            l3 - l2 + m1 + k,
            l3 - l1 - m2 + k,
        ];
        if terms.iter().any(|&t| t < 0) {
            continue;
        }
        let denom = factorial(k) * terms.iter().map(|&t| factorial(t)).product::<f64>();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / denom;
    }
    pre * sum
}

/// Rows of the real-from-complex change of basis `Y_real[a] = Σ_m U[a][m] Y_complex[m]`,
/// stored sparsely as at most two `(m_index, coefficient)` pairs per row.
fn real_from_complex(l: usize) -> Vec<Vec<(usize, Complex64)>> {
    let li = l as i64;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut rows = Vec::with_capacity(2 * l + 1);
    for a in -li..=li {
        let idx = |m: i64| (m + li) as usize;
        let row = if a == 0 {
            vec![(idx(0), Complex64::new(1.0, 0.0))]
        } else if a > 0 {
            let s = if a % 2 == 0 { 1.0 } else { -1.0 };
            vec![
                (idx(a), Complex64::new(s * h, 0.0)),
                (idx(-a), Complex64::new(h, 0.0)),
            ]
        } else {
            let mu = -a;
            let s = if mu % 2 == 0 { 1.0 } else { -1.0 };
            vec![
                (idx(-mu), Complex64::new(0.0, h)),
                (idx(mu), Complex64::new(0.0, -s * h)),
            ]
        };
        rows.push(row);
    }
    rows
}

fn build(l1: usize, l2: usize, l3: usize) -> CgTensor {
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let (i1, i2, i3) = (l1 as i64, l2 as i64, l3 as i64);
    let mut cc = vec![0.0; d1 * d2 * d3];
    for m1 in -i1..=i1 {
        for m2 in -i2..=i2 {
            let m3 = m1 + m2;
            if m3.abs() > i3 {
                continue;
            }
            cc[((m1 + i1) as usize * d2 + (m2 + i2) as usize) * d3 + (m3 + i3) as usize] =
                complex_cg(i1, m1, i2, m2, i3, m3);
        }
    }
    let (u1, u2, u3) = (
        real_from_complex(l1),
        real_from_complex(l2),
        real_from_complex(l3),
    );
    // C_real[a,b,c] = Σ conj(U1[a,m1]) conj(U2[b,m2]) U3[c,m3] C[m1,m2,m3]
    let mut cr = vec![Complex64::new(0.0, 0.0); d1 * d2 * d3];
    for a in 0..d1 {
        for b in 0..d2 {
            for c in 0..d3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(m1, x1) in &u1[a] {
                    for &(m2, x2) in &u2[b] {
                        for &(m3, x3) in &u3[c] {
                            let v = cc[(m1 * d2 + m2) * d3 + m3];
                            if v != 0.0 {
                                acc += x1.conj() * x2.conj() * x3 * v;
                            }
                        }
                    }
                }
                cr[(a * d2 + b) * d3 + c] = acc;
            }
        }
    }
    // the result is either purely real or purely imaginary
    let re: f64 = cr.iter().map(|z| z.re.abs()).sum();
    let im: f64 = cr.iter().map(|z| z.im.abs()).sum();
    let mut data: Vec<f64> = if re >= im {
        cr.iter().map(|z| z.re).collect()
    } else {
        cr.iter().map(|z| z.im).collect()
    };
    if let Some(first) = data.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            data.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let mut nonzeros = Vec::new();
    for a in 0..d1 {
        for b in 0..d2 {
            for c in 0..d3 {
                let v = data[(a * d2 + b) * d3 + c];
                if v.abs() > 1e-14 {
                    nonzeros.push((a, b, c, v));
                } else {
                    data[(a * d2 + b) * d3 + c] = 0.0;
                }
            }
        }
    }
    CgTensor {
        l1,
        l2,
        l3,
        data,
        nonzeros,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_coupling_is_one() {
        let c = clebsch_gordan(0, 0, 0).unwrap();
        assert_eq!(c.data(), &[1.0]);
    }

    #[test]
    fn vector_pairing_to_scalar() {
        // oracle: the only invariant bilinear form on l=1 in an orthonormal basis is δ/√3
        let c = clebsch_gordan(1, 1, 0).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let e = if a == b { 1.0 / 3f64.sqrt() } else { 0.0 };
                assert!((c.get(a, b, 0) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn columns_orthonormal() {
        for l1 in 0..=L_MAX {
            for l2 in 0..=L_MAX {
                for l3 in 0..=L_MAX {
                    if !triangle(l1, l2, l3) {
                        continue;
                    }
                    let c = clebsch_gordan(l1, l2, l3).unwrap();
                    let (d1, d2, d3) = c.dims();
                    for p in 0..d3 {
                        for q in 0..d3 {
                            let mut s = 0.0;
                            for a in 0..d1 {
                                for b in 0..d2 {
                                    s += c.get(a, b, p) * c.get(a, b, q);
                                }
                            }
                            let e = if p == q { 1.0 } else { 0.0 };
                            assert!((s - e).abs() < 1e-11, "({l1},{l2},{l3}) [{p},{q}] = {s}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn triangle_violation_is_domain_error() {
        assert!(matches!(clebsch_gordan(1, 1, 3), Err(Error::Domain(_))));
        assert!(matches!(clebsch_gordan(0, 7, 7), Err(Error::Capability(_))));
    }
}
