//! Extended-precision reference evaluators used to cross-check closed forms.

use std::cmp::Ordering;

use num_complex::Complex64;

use crate::error::Result;
use crate::hamiltonian::{BlockSparseHamiltonian, SpinRegion};
use crate::objective::{KTerm, LossWeights};

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (s, e) = two_sum(hi, lo);
        DoubleDouble { hi: s, lo: e }
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        Self::norm(s, e + self.lo + o.lo)
    }

    pub fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        Self::norm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn mul_f64(self, x: f64) -> Self {
        self.mul(Self::from_f64(x))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn cmp(&self, o: &Self) -> Ordering {
        self.hi.total_cmp(&o.hi).then(self.lo.total_cmp(&o.lo))
    }
}

/// `|r − μ s|²` accumulated without losing the μ-dependence to rounding.
fn sq_shift(acc: &mut DoubleDouble, r: Complex64, s: Complex64, mu: f64) {
    let m = DoubleDouble::from_f64(mu);
    for (a, b) in [(r.re, s.re), (r.im, s.im)] {
        let d = DoubleDouble::from_f64(a).sub(m.mul_f64(b));
        *acc = acc.add(d.mul(d));
    }
}

/// The joint μ-quadratic evaluated term by term in double-double precision.
pub fn joint_quadratic_dd(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    terms: &[KTerm],
    w: &LossWeights,
    mu: f64,
) -> Result<DoubleDouble> {
    let zero = Complex64::new(0.0, 0.0);
    let mut r_acc = DoubleDouble::default();
    let mut n_r = 0usize;
    for (k, _) in pred.iter() {
        let sb = s
            .block(k, SpinRegion::UpUp)
            .ok_or_else(|| crate::Error::Structural("overlap misses an edge".into()))?;
        let regions: &[SpinRegion] = if pred.is_spinful() { &SpinRegion::ALL } else { &SpinRegion::ALL[..1] };
        for &region in regions {
            let p = pred.block(k, region).expect("present");
            let g = gt
                .block(k, region)
                .ok_or_else(|| crate::Error::Structural("ground truth misses an edge".into()))?;
            for idx in 0..p.len() {
                let sv = if region.is_spin_flip() { zero } else { sb[idx] };
                sq_shift(&mut r_acc, p[idx] - g[idx], sv, mu);
                n_r += 1;
            }
        }
    }
    let mut total = r_acc.mul_f64(w.lambda_r / n_r.max(1) as f64);
    let (mut pp, mut qq, mut pq) = (DoubleDouble::default(), DoubleDouble::default(), DoubleDouble::default());
    let (mut np, mut nq, mut npq) = (0usize, 0usize, 0usize);
    let one = Complex64::new(1.0, 0.0);
    for t in terms {
        for (acc, n, a, b) in [(&mut pp, &mut np, &t.pred.pp, &t.gt.pp), (&mut qq, &mut nq, &t.pred.qq, &t.gt.qq)] {
            for r in 0..a.nrows() {
                for c in 0..a.ncols() {
                    let sv = if r == c { one } else { zero };
                    sq_shift(acc, a[(r, c)] - b[(r, c)], sv, mu);
                }
            }
            *n += a.len();
        }
        for z in t.pred.pq.iter() {
            sq_shift(&mut pq, *z, zero, 0.0);
        }
        npq += t.pred.pq.len();
    }
    if np > 0 {
        total = total.add(pp.mul_f64(w.lambda_p / np as f64));
    }
    if nq > 0 {
        total = total.add(qq.mul_f64(w.lambda_q / nq as f64));
    }
    if npq > 0 {
        total = total.add(pq.mul_f64(w.lambda_pq / npq as f64));
    }
    Ok(total)
}

/// Golden-section minimizer over `[lo, hi]` comparing double-double values.
pub fn golden_section_dd(f: impl Fn(f64) -> DoubleDouble, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol && c < d {
        if fc.cmp(&fd) != Ordering::Greater {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_resolves_below_f64() {
        let a = DoubleDouble::from_f64(1.0).add(DoubleDouble::from_f64(1e-20));
        assert!(a.cmp(&DoubleDouble::from_f64(1.0)) == Ordering::Greater);
        let p = DoubleDouble::from_f64(1.0 + 2f64.powi(-30)).mul(DoubleDouble::from_f64(1.0 - 2f64.powi(-30)));
        assert_eq!(p.hi, 1.0);
        assert_eq!(p.lo, -2f64.powi(-60));
    }

    #[test]
    fn golden_section_dd_finds_quadratic_minimum() {
        let x0 = 0.123456789012345;
        let f = |x: f64| {
            let d = DoubleDouble::from_f64(x).sub(DoubleDouble::from_f64(x0));
            d.mul(d).add(DoubleDouble::from_f64(1e6))
        };
        assert!((golden_section_dd(f, -100.0, 100.0, 1e-13) - x0).abs() < 1e-12);
    }
}
