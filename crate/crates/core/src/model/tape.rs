//! Reverse-mode tape over row-major real matrices.

use std::sync::Arc;

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// Backward rule: node values, output gradient, and which parents need a
/// gradient; returns one optional gradient per parent.
pub type BackFn = Box<dyn Fn(&[Mat], &Mat, &[bool]) -> Vec<Option<Mat>>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Default)]
pub struct Tape {
    values: Vec<Mat>,
    nodes: Vec<Node>,
    leaves: Vec<(usize, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.values.push(m);
        self.nodes.push(Node {
            parents: Vec::new(),
            back: None,
            needs_grad: false,
        });
        Var(self.values.len() - 1)
    }

    /// Differentiable leaf tagged with `offset` into a flat parameter vector.
    pub fn leaf(&mut self, m: Mat, offset: usize) -> Var {
        self.values.push(m);
        self.nodes.push(Node {
            parents: Vec::new(),
            back: None,
            needs_grad: true,
        });
        let idx = self.values.len() - 1;
        self.leaves.push((idx, offset));
        Var(idx)
    }

    /// Differentiable leaf not tied to parameters (used for probes).
    pub fn input(&mut self, m: Mat) -> Var {
        self.values.push(m);
        self.nodes.push(Node {
            parents: Vec::new(),
            back: None,
            needs_grad: true,
        });
        Var(self.values.len() - 1)
    }

    pub fn custom(&mut self, value: Mat, parents: &[Var], back: BackFn) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents: parents.iter().map(|p| p.0).collect(),
            back: if needs_grad { Some(back) } else { None },
            needs_grad,
        });
        Var(self.values.len() - 1)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.values[out.0].shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let pg = back(&self.values, &g, &need);
            for ((&p, gp), n) in node.parents.iter().zip(pg).zip(&need) {
                if !n {
                    continue;
                }
                if let Some(gp) = gp {
                    match &mut grads[p] {
                        Some(acc) => *acc += gp,
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }

    pub fn grad_of<'a>(&self, grads: &'a [Option<Mat>], v: Var) -> Option<&'a Mat> {
        grads[v.0].as_ref()
    }

    /// Accumulate leaf gradients into a flat vector of length `n`.
    pub fn parameter_gradient(&self, grads: &[Option<Mat>], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(idx, off) in &self.leaves {
            if let Some(g) = &grads[idx] {
                // leaves are row vectors or row-major matrices over a contiguous range
                let (r, c) = g.shape();
                for a in 0..r {
                    for b in 0..c {
                        out[off + a * c + b] += g[(a, b)];
                    }
                }
            }
        }
        out
    }

    // ---- generic ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.custom(
            v,
            &[a, b],
            Box::new(move |vals, g, need| {
                vec![
                    need[0].then(|| g * vals[ib].transpose()),
                    need[1].then(|| vals[ia].transpose() * g),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.custom(v, &[a, b], Box::new(|_, g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.custom(v, &[a, b], Box::new(|_, g, need| vec![need[0].then(|| g.clone()), need[1].then(|| -g)]))
    }

    /// Add a `1 x c` row to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        assert_eq!(r.nrows(), 1);
        let mut v = self.value(a).clone();
        for mut x in v.row_iter_mut() {
            x += &r;
        }
        self.custom(
            v,
            &[a, row],
            Box::new(|_, g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| Mat::from_fn(1, g.ncols(), |_, c| g.column(c).sum())),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        let (ia, ib) = (a.0, b.0);
        self.custom(
            v,
            &[a, b],
            Box::new(move |vals, g, need| {
                vec![
                    need[0].then(|| g.component_mul(&vals[ib])),
                    need[1].then(|| g.component_mul(&vals[ia])),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.custom(v, &[a], Box::new(move |_, g, _| vec![Some(g * s)]))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let ia = a.0;
        self.custom(
            v,
            &[a],
            Box::new(move |vals, g, _| vec![Some(g.zip_map(&vals[ia], |gi, x| gi * df(x)))]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, silu_d1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(a).sum());
        let shape = self.value(a).shape();
        self.custom(v, &[a], Box::new(move |_, g, _| vec![Some(Mat::from_element(shape.0, shape.1, g[(0, 0)]))]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            assert_eq!(self.value(*p).nrows(), rows, "concat needs equal row counts");
            v.columns_mut(off, *w).copy_from(self.value(*p));
            off += w;
        }
        self.custom(
            v,
            parts,
            Box::new(move |_, g, need| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(w, n)| {
                        let out = n.then(|| g.columns(off, *w).into_owned());
                        off += w;
                        out
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        let shape = self.value(a).shape();
        self.custom(
            v,
            &[a],
            Box::new(move |_, g, _| {
                let mut out = Mat::zeros(shape.0, shape.1);
                out.columns_mut(start, len).copy_from(g);
                vec![Some(out)]
            }),
        )
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let n_src = src.nrows();
        let v = Mat::from_fn(idx.len(), src.ncols(), |r, c| src[(idx[r], c)]);
        self.custom(
            v,
            &[a],
            Box::new(move |_, g, _| {
                let mut out = Mat::zeros(n_src, g.ncols());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += g.row(r);
                }
                vec![Some(out)]
            }),
        )
    }

    /// `out[idx[r]] += a[r]` over `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros(n_out, src.ncols());
        for (r, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += src.row(r);
        }
        self.custom(
            v,
            &[a],
            Box::new(move |_, g, _| vec![Some(Mat::from_fn(idx.len(), g.ncols(), |r, c| g[(idx[r], c)]))]),
        )
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, logits: Var, seg: Arc<Vec<usize>>, n_seg: usize) -> Var {
        let x = self.value(logits);
        let (rows, cols) = x.shape();
        let mut mx = Mat::from_element(n_seg, cols, f64::NEG_INFINITY);
        for r in 0..rows {
            for c in 0..cols {
                mx[(seg[r], c)] = mx[(seg[r], c)].max(x[(r, c)]);
            }
        }
        let mut e = Mat::from_fn(rows, cols, |r, c| (x[(r, c)] - mx[(seg[r], c)]).exp());
        let mut den = Mat::zeros(n_seg, cols);
        for r in 0..rows {
            for c in 0..cols {
                den[(seg[r], c)] += e[(r, c)];
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                e[(r, c)] /= den[(seg[r], c)];
            }
        }
        let out_idx = self.values.len();
        self.custom(
            e,
            &[logits],
            Box::new(move |vals, g, _| {
                let y = &vals[out_idx];
                let mut dot = Mat::zeros(n_seg, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dot[(seg[r], c)] += g[(r, c)] * y[(r, c)];
                    }
                }
                vec![Some(Mat::from_fn(rows, cols, |r, c| y[(r, c)] * (g[(r, c)] - dot[(seg[r], c)])))]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Largest relative error between tape gradients and central differences
    /// for every input of `f`.
    pub fn gradcheck(inputs: &[Mat], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.constant(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o)[(0, 0)]
        };
        let mut worst: f64 = 0.0;
        for (n, m) in inputs.iter().enumerate() {
            let g = grads[vars[n].0].clone().unwrap_or_else(|| Mat::zeros(m.nrows(), m.ncols()));
            for idx in 0..m.len() {
                let h = 1e-6 * m[idx].abs().max(1.0);
                let mut plus = inputs.to_vec();
                plus[n][idx] += h;
                let mut minus = inputs.to_vec();
                minus[n][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        worst
    }

    pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn generic_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5)];
        let err = gradcheck(&ins, &|t, v| {
            let m = t.matmul(v[0], v[1]);
            let b = t.add_row(m, v[2]);
            let s = t.silu(b);
            let sp = t.softplus(s);
            let sq = t.square(sp);
            let sg = t.sigmoid(b);
            let p = t.mul(sq, sg);
            let c = t.concat_cols(&[p, b]);
            let sl = t.slice_cols(c, 2, 5);
            let sc = t.scale(sl, 0.7);
            let d = t.sub(sc, b);
            t.sum(d)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_scatter_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = Arc::new(vec![0, 2, 2, 1, 0]);
        let seg = Arc::new(vec![0, 0, 1, 1, 1]);
        let ins = vec![rand_mat(&mut rng, 3, 2), rand_mat(&mut rng, 5, 2)];
        let err = gradcheck(&ins, &|t, v| {
            let g = t.gather_rows(v[0], idx.clone());
            let a = t.segment_softmax(v[1], seg.clone(), 2);
            let w = t.mul(g, a);
            let s = t.scatter_add_rows(w, idx.clone(), 3);
            let q = t.square(s);
            let ab = t.abs(q);
            t.sum(ab)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_normalizes_per_segment() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_row_slice(3, 1, &[1.0, 2.0, 5.0]));
        let y = t.segment_softmax(x, Arc::new(vec![0, 0, 1]), 2);
        let v = t.value(y);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn silu_derivatives() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-5;
            assert!(((silu(x + h) - silu(x - h)) / (2.0 * h) - silu_d1(x)).abs() < 1e-8);
            assert!(((silu_d1(x + h) - silu_d1(x - h)) / (2.0 * h) - silu_d2(x)).abs() < 1e-8);
        }
    }
}
