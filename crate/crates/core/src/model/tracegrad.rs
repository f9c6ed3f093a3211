//! TraceGrad: an invariant network `z` over edge features and delivery of its
//! gradient back into the equivariant channels, `o = f' + ∂(Σz)/∂f'`.
//!
//! The gradient is formed analytically inside one tape node, so the backward
//! of `o` carries the second-order terms of `z` without a general
//! double-backward facility.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{Init, Parameters};
use super::tape::{silu, silu_d1, silu_d2, Mat, Tape, Var};
use crate::irreps::IrrepSpec;

#[derive(Debug)]
struct Layout {
    /// Columns of `0e` channels.
    scalars: Vec<usize>,
    /// Column ranges of every other copy.
    copies: Vec<(usize, usize)>,
    eps: f64,
}

impl Layout {
    fn du(&self) -> usize {
        self.scalars.len() + self.copies.len()
    }

    /// Invariant inputs and the smooth copy norms.
    fn invariants(&self, x: &Mat) -> (Mat, Mat) {
        let rows = x.nrows();
        let ns = self.scalars.len();
        let mut u = Mat::zeros(rows, self.du());
        let mut n = Mat::zeros(rows, self.copies.len());
        for (k, &c) in self.scalars.iter().enumerate() {
            u.column_mut(k).copy_from(&x.column(c));
        }
        for (t, &(start, d)) in self.copies.iter().enumerate() {
            for r in 0..rows {
                let ss: f64 = (start..start + d).map(|c| x[(r, c)] * x[(r, c)]).sum();
                let v = (ss + self.eps * self.eps).sqrt();
                n[(r, t)] = v;
                u[(r, ns + t)] = v;
            }
        }
        (u, n)
    }

    /// Pull a gradient on `u` back onto `x`.
    fn pull(&self, x: &Mat, n: &Mat, gu: &Mat, gx: &mut Mat) {
        let ns = self.scalars.len();
        for (k, &c) in self.scalars.iter().enumerate() {
            let mut col = gx.column_mut(c);
            col += gu.column(k);
        }
        for (t, &(start, d)) in self.copies.iter().enumerate() {
            for r in 0..x.nrows() {
                let f = gu[(r, ns + t)] / n[(r, t)];
                for c in start..start + d {
                    gx[(r, c)] += f * x[(r, c)];
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceGrad {
    pub spec: IrrepSpec,
    pub dim: usize,
    layout: Arc<Layout>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl TraceGrad {
    pub fn new(name: &str, spec: &IrrepSpec, dim: usize, params: &mut Parameters, rng: &mut ChaCha8Rng) -> Self {
        let mut scalars = Vec::new();
        let mut copies = Vec::new();
        for (k, e) in spec.entries().iter().enumerate() {
            for c in 0..e.mul {
                let r = spec.slice(k, c);
                if e.irrep.is_scalar() {
                    scalars.push(r.start);
                } else {
                    copies.push((r.start, r.len()));
                }
            }
        }
        let layout = Layout { scalars, copies, eps: 0.1 };
        let du = layout.du();
        let w1 = params.add(format!("{name}.w1"), dim, du, Init::FanIn(du), rng);
        let b1 = params.add(format!("{name}.b1"), 1, dim, Init::Zeros, rng);
        let w2 = params.add(format!("{name}.w2"), dim, dim, Init::FanIn(dim), rng);
        let b2 = params.add(format!("{name}.b2"), 1, dim, Init::Zeros, rng);
        TraceGrad {
            spec: spec.clone(),
            dim,
            layout: Arc::new(layout),
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn preact(layout: &Layout, x: &Mat, w1: &Mat, b1: &Mat) -> (Mat, Mat, Mat) {
        let (u, n) = layout.invariants(x);
        let mut a = &u * w1.transpose();
        for mut row in a.row_iter_mut() {
            row += b1;
        }
        (u, n, a)
    }

    /// Invariant edge code `z = silu(u W1ᵀ + b1) W2ᵀ + b2`.
    pub fn z(&self, tape: &mut Tape, f: Var, pv: &[Var]) -> Var {
        let (w1, b1, w2, b2) = (pv[self.w1], pv[self.b1], pv[self.w2], pv[self.b2]);
        let (_, _, a) = Self::preact(&self.layout, tape.value(f), tape.value(w1), tape.value(b1));
        let h = a.map(silu);
        let mut z = &h * tape.value(w2).transpose();
        for mut row in z.row_iter_mut() {
            row += tape.value(b2);
        }
        let layout = self.layout.clone();
        let (fi, w1i, b1i, w2i) = (f.0, w1.0, b1.0, w2.0);
        tape.custom(
            z,
            &[f, w1, b1, w2, b2],
            Box::new(move |vals, g, need| {
                let (x, w1, b1, w2) = (&vals[fi], &vals[w1i], &vals[b1i], &vals[w2i]);
                let (u, n, a) = Self::preact(&layout, x, w1, b1);
                let h = a.map(silu);
                let ga = (g * w2).zip_map(&a, |v, t| v * silu_d1(t));
                let gx = need[0].then(|| {
                    let mut gx = Mat::zeros(x.nrows(), x.ncols());
                    layout.pull(x, &n, &(&ga * w1), &mut gx);
                    gx
                });
                vec![
                    gx,
                    need[1].then(|| ga.transpose() * &u),
                    need[2].then(|| col_sums(&ga)),
                    need[3].then(|| g.transpose() * &h),
                    need[4].then(|| col_sums(g)),
                ]
            }),
        )
    }

    /// Delivered features `o = f' + ∂(Σ z)/∂f'`.
    pub fn deliver(&self, tape: &mut Tape, f: Var, pv: &[Var]) -> Var {
        let (w1, b1, w2) = (pv[self.w1], pv[self.b1], pv[self.w2]);
        let x = tape.value(f);
        let (_, n, a) = Self::preact(&self.layout, x, tape.value(w1), tape.value(b1));
        let c = col_sums(tape.value(w2));
        let ga = a.map(silu_d1) * Mat::from_diagonal(&c.row(0).transpose());
        let gu = &ga * tape.value(w1);
        let mut o = x.clone();
        self.layout.pull(x, &n, &gu, &mut o);
        let layout = self.layout.clone();
        let (fi, w1i, b1i, w2i) = (f.0, w1.0, b1.0, w2.0);
        tape.custom(
            o,
            &[f, w1, b1, w2],
            Box::new(move |vals, g, need| {
                let (x, w1, b1, w2) = (&vals[fi], &vals[w1i], &vals[b1i], &vals[w2i]);
                let (u, n, a) = Self::preact(&layout, x, w1, b1);
                let c = col_sums(w2);
                let cdiag = Mat::from_diagonal(&c.row(0).transpose());
                let s1 = a.map(silu_d1);
                let ga = &s1 * &cdiag;
                let gu = &ga * w1;
                let ns = layout.scalars.len();
                let rows = x.nrows();

                let mut gx = g.clone();
                // gradient on the delivered u-gradient, plus the direct x/n factor
                let mut ggu = Mat::zeros(rows, layout.du());
                for (k, &col) in layout.scalars.iter().enumerate() {
                    ggu.column_mut(k).copy_from(&g.column(col));
                }
                for (t, &(start, d)) in layout.copies.iter().enumerate() {
                    for r in 0..rows {
                        let nn = n[(r, t)];
                        let dot: f64 = (start..start + d).map(|col| g[(r, col)] * x[(r, col)]).sum();
                        ggu[(r, ns + t)] = dot / nn;
                        let f1 = gu[(r, ns + t)] / nn;
                        let f3 = gu[(r, ns + t)] * dot / (nn * nn * nn);
                        for col in start..start + d {
                            gx[(r, col)] += f1 * g[(r, col)] - f3 * x[(r, col)];
                        }
                    }
                }
                let mut gw1 = ga.transpose() * &ggu;
                let gga = &ggu * w1.transpose();
                let gc = col_sums(&gga.component_mul(&s1));
                let gs1 = &gga * &cdiag;
                let gpre = gs1.zip_map(&a, |v, t| v * silu_d2(t));
                gw1 += gpre.transpose() * &u;
                layout.pull(x, &n, &(&gpre * w1), &mut gx);
                let gw2 = need[3].then(|| Mat::from_fn(w2.nrows(), w2.ncols(), |_, h| gc[h]));
                vec![need[0].then_some(gx), need[1].then_some(gw1), need[2].then(|| col_sums(&gpre)), gw2]
            }),
        )
    }
}

fn col_sums(m: &Mat) -> Mat {
    Mat::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::RotationParity;
    use crate::model::equiv::transform_rows;
    use crate::model::tape::tests::{gradcheck, rand_mat};
    use rand::SeedableRng;

    fn setup() -> (TraceGrad, Parameters, IrrepSpec) {
        let spec: IrrepSpec = "3x0e+2x1o+1x1e+2x2e+1x0o".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Parameters::default();
        let tg = TraceGrad::new("tg", &spec, 6, &mut p, &mut rng);
        for (i, v) in p.values.iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64 - 3.0);
        }
        (tg, p, spec)
    }

    fn param_mats(p: &Parameters) -> Vec<Mat> {
        p.registry.iter().enumerate().map(|(i, e)| Mat::from_row_slice(e.rows, e.cols, p.slice(i))).collect()
    }

    #[test]
    fn delivered_gradient_matches_finite_differences_of_sum_z() {
        let (tg, p, spec) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_mat(&mut rng, 4, spec.dim());
        let mut t = Tape::new();
        let pv: Vec<Var> = param_mats(&p).into_iter().map(|m| t.constant(m)).collect();
        let f = t.constant(x.clone());
        let ov = tg.deliver(&mut t, f, &pv);
        let o = t.value(ov).clone() - &x;
        let sum_z = |x: &Mat| {
            let mut t = Tape::new();
            let pv: Vec<Var> = param_mats(&p).into_iter().map(|m| t.constant(m)).collect();
            let f = t.constant(x.clone());
            let z = tg.z(&mut t, f, &pv);
            t.value(z).sum()
        };
        for idx in 0..x.len() {
            let h = 1e-6;
            let (mut a, mut b) = (x.clone(), x.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (sum_z(&a) - sum_z(&b)) / (2.0 * h);
            assert!((fd - o[idx]).abs() <= 1e-6 * fd.abs().max(1e-2), "{idx}: {fd} vs {}", o[idx]);
        }
    }

    #[test]
    fn second_order_backward_gradcheck() {
        let (tg, p, spec) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ins = vec![rand_mat(&mut rng, 3, spec.dim())];
        ins.extend(param_mats(&p));
        let target = rand_mat(&mut rng, 3, spec.dim());
        let err = gradcheck(&ins, &|t, v| {
            let o = tg.deliver(t, v[0], &v[1..]);
            let z = tg.z(t, v[0], &v[1..]);
            let tv = t.constant(target.clone());
            let d = t.sub(o, tv);
            let q = t.square(d);
            let zs = t.square(z);
            let a = t.sum(q);
            let b = t.sum(zs);
            t.add(a, b)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn z_invariant_and_o_equivariant() {
        let (tg, p, spec) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_mat(&mut rng, 3, spec.dim());
        let run = |x: &Mat| {
            let mut t = Tape::new();
            let pv: Vec<Var> = param_mats(&p).into_iter().map(|m| t.constant(m)).collect();
            let f = t.constant(x.clone());
            let z = tg.z(&mut t, f, &pv);
            let o = tg.deliver(&mut t, f, &pv);
            (t.value(z).clone(), t.value(o).clone())
        };
        let (z0, o0) = run(&x);
        for inv in [false, true] {
            let rp = RotationParity::from_uniforms([0.9, 0.2, 0.4], inv);
            let (z1, o1) = run(&transform_rows(&x, &spec, &rp));
            assert!((z1 - &z0).amax() < 1e-12);
            assert!((o1 - transform_rows(&o0, &spec, &rp)).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_finite_delivery() {
        let (tg, p, spec) = setup();
        let mut t = Tape::new();
        let pv: Vec<Var> = param_mats(&p).into_iter().map(|m| t.constant(m)).collect();
        let f = t.constant(Mat::zeros(2, spec.dim()));
        let o = tg.deliver(&mut t, f, &pv);
        assert!(t.value(o).iter().all(|v| v.is_finite()));
    }
}
