//! Equivariant layers on row-stacked feature matrices (one row per node or
//! edge, columns laid out against an [`IrrepSpec`]).

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::Parameters;
use super::tape::{sigmoid, silu, silu_d1, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::irreps::{clebsch_gordan, triangle, CgTensor, Irrep, IrrepEntry, IrrepSpec, Parity};

/// Global copy index of every column.
pub fn copy_of_column(spec: &IrrepSpec) -> Vec<usize> {
    let mut out = Vec::with_capacity(spec.dim());
    let mut copy = 0;
    for e in spec.entries() {
        for _ in 0..e.mul {
            out.extend(std::iter::repeat(copy).take(e.irrep.dim()));
            copy += 1;
        }
    }
    out
}

/// Columns holding `0e` channels.
pub fn scalar_columns(spec: &IrrepSpec) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, e) in spec.entries().iter().enumerate() {
        if e.irrep.is_scalar() {
            out.extend(spec.entry_range(k));
        }
    }
    out
}

/// Concatenation of specs as one (unsorted) spec.
pub fn concat_specs(parts: &[&IrrepSpec]) -> IrrepSpec {
    let entries: Vec<IrrepEntry> = parts.iter().flat_map(|s| s.entries().iter().copied()).collect();
    IrrepSpec::new(entries).expect("concatenation of valid specs")
}

#[derive(Clone, Debug)]
struct LinPath {
    ei: usize,
    eo: usize,
    w_off: usize,
}

/// Irrep-wise linear map mixing copies of equal irreps; bias on `0e` outputs only.
#[derive(Clone, Debug)]
pub struct EquivLinear {
    pub in_spec: IrrepSpec,
    pub out_spec: IrrepSpec,
    paths: Arc<Vec<LinPath>>,
    bias: Arc<Vec<(usize, usize)>>,
    w: usize,
    b: Option<usize>,
}

impl EquivLinear {
    pub fn new(
        name: &str,
        in_spec: &IrrepSpec,
        out_spec: &IrrepSpec,
        bias: bool,
        params: &mut Parameters,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(name, in_spec, out_spec, bias, true, params, rng)
    }

    /// Like [`new`](Self::new), but output irreps without a matching input stay zero.
    pub fn lenient(
        name: &str,
        in_spec: &IrrepSpec,
        out_spec: &IrrepSpec,
        params: &mut Parameters,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(name, in_spec, out_spec, true, false, params, rng)
    }

    fn build(
        name: &str,
        in_spec: &IrrepSpec,
        out_spec: &IrrepSpec,
        bias: bool,
        strict: bool,
        params: &mut Parameters,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut paths = Vec::new();
        let mut init = Vec::new();
        for (eo, o) in out_spec.entries().iter().enumerate() {
            let fan = in_spec.multiplicity(o.irrep);
            if fan == 0 && !strict {
                continue;
            }
            if fan == 0 {
                return Err(Error::Configuration(format!(
                    "{name}: output irrep {} has no input channel in {in_spec}",
                    o.irrep
                )));
            }
            let a = (3.0 / fan as f64).sqrt();
            for (ei, i) in in_spec.entries().iter().enumerate() {
                if i.irrep != o.irrep {
                    continue;
                }
                paths.push(LinPath { ei, eo, w_off: init.len() });
                for _ in 0..o.mul * i.mul {
                    init.push(rng.gen_range(-a..a));
                }
            }
        }
        let n = init.len();
        let w = params.add_values(format!("{name}.w"), 1, n, init);
        let mut bias_map = Vec::new();
        let mut nb = 0;
        if bias {
            for (eo, o) in out_spec.entries().iter().enumerate() {
                if o.irrep.is_scalar() {
                    bias_map.push((eo, nb));
                    nb += o.mul;
                }
            }
        }
        let b = (nb > 0).then(|| params.add_values(format!("{name}.b"), 1, nb, vec![0.0; nb]));
        Ok(EquivLinear {
            in_spec: in_spec.clone(),
            out_spec: out_spec.clone(),
            paths: Arc::new(paths),
            bias: Arc::new(bias_map),
            w,
            b,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, pv: &[Var]) -> Result<Var> {
        let xv = tape.value(x);
        if xv.ncols() != self.in_spec.dim() {
            return Err(Error::Structural(format!(
                "linear expects {} columns ({}), got {}",
                self.in_spec.dim(),
                self.in_spec,
                xv.ncols()
            )));
        }
        let (ins, outs) = (self.in_spec.clone(), self.out_spec.clone());
        let rows = xv.nrows();
        let wv = tape.value(pv[self.w]).clone();
        let mut out = Mat::zeros(rows, outs.dim());
        for p in self.paths.iter() {
            let (ie, oe) = (ins.entries()[p.ei], outs.entries()[p.eo]);
            let d = ie.irrep.dim();
            let (io, oo) = (ins.offset(p.ei), outs.offset(p.eo));
            for w in 0..oe.mul {
                for u in 0..ie.mul {
                    let coef = wv[p.w_off + w * ie.mul + u];
                    for m in 0..d {
                        let src = xv.column(io + u * d + m);
                        out.column_mut(oo + w * d + m).axpy(coef, &src, 1.0);
                    }
                }
            }
        }
        let mut parents = vec![x, pv[self.w]];
        if let Some(b) = self.b {
            let bv = tape.value(pv[b]);
            for &(eo, bo) in self.bias.iter() {
                let oo = outs.offset(eo);
                for c in 0..outs.entries()[eo].mul {
                    out.column_mut(oo + c).add_scalar_mut(bv[bo + c]);
                }
            }
            parents.push(pv[b]);
        }
        let paths = self.paths.clone();
        let bias = self.bias.clone();
        let (xi, wi) = (x.0, pv[self.w].0);
        Ok(tape.custom(
            out,
            &parents,
            Box::new(move |vals, g, need| {
                let (xv, wv) = (&vals[xi], &vals[wi]);
                let mut gx = need[0].then(|| Mat::zeros(xv.nrows(), xv.ncols()));
                let mut gw = need[1].then(|| Mat::zeros(1, wv.ncols()));
                for p in paths.iter() {
                    let (ie, oe) = (ins.entries()[p.ei], outs.entries()[p.eo]);
                    let d = ie.irrep.dim();
                    let (io, oo) = (ins.offset(p.ei), outs.offset(p.eo));
                    for w in 0..oe.mul {
                        for u in 0..ie.mul {
                            let k = p.w_off + w * ie.mul + u;
                            for m in 0..d {
                                let gc = g.column(oo + w * d + m);
                                if let Some(gx) = gx.as_mut() {
                                    gx.column_mut(io + u * d + m).axpy(wv[k], &gc, 1.0);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[k] += gc.dot(&xv.column(io + u * d + m));
                                }
                            }
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if need.len() > 2 {
                    let nb: usize = bias.iter().map(|&(eo, _)| outs.entries()[eo].mul).sum();
                    let mut gb = Mat::zeros(1, nb);
                    for &(eo, bo) in bias.iter() {
                        let oo = outs.offset(eo);
                        for c in 0..outs.entries()[eo].mul {
                            gb[bo + c] = g.column(oo + c).sum();
                        }
                    }
                    res.push(need[2].then_some(gb));
                }
                res
            }),
        ))
    }
}

/// Gated non-linearity: `0e` channels pass through SiLU, every other copy is
/// scaled by the sigmoid of its own extra `0e` gate channel.
#[derive(Clone, Debug)]
pub struct Gate {
    pub spec: IrrepSpec,
    pub in_spec: IrrepSpec,
    /// Per output column: input column and optional gate column.
    map: Arc<Vec<(usize, Option<usize>)>>,
}

impl Gate {
    pub fn new(spec: &IrrepSpec) -> Self {
        let n_gate: usize = spec.entries().iter().filter(|e| !e.irrep.is_scalar()).map(|e| e.mul).sum();
        let in_spec = if n_gate > 0 {
            concat_specs(&[spec, &IrrepSpec::from_pairs(&[(n_gate, Irrep::new(0, Parity::Even))]).unwrap()])
        } else {
            spec.clone()
        };
        let mut map = Vec::with_capacity(spec.dim());
        let mut gate = spec.dim();
        for (k, e) in spec.entries().iter().enumerate() {
            for c in 0..e.mul {
                for col in spec.slice(k, c) {
                    map.push((col, (!e.irrep.is_scalar()).then_some(gate)));
                }
                if !e.irrep.is_scalar() {
                    gate += 1;
                }
            }
        }
        Gate {
            spec: spec.clone(),
            in_spec,
            map: Arc::new(map),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let xv = tape.value(x);
        let mut out = Mat::zeros(xv.nrows(), self.spec.dim());
        for (col, &(src, gate)) in self.map.iter().enumerate() {
            let mut oc = out.column_mut(col);
            match gate {
                None => oc.zip_apply(&xv.column(src), |o, v| *o = silu(v)),
                Some(gc) => {
                    for r in 0..xv.nrows() {
                        oc[r] = xv[(r, src)] * sigmoid(xv[(r, gc)]);
                    }
                }
            }
        }
        let map = self.map.clone();
        let xi = x.0;
        tape.custom(
            out,
            &[x],
            Box::new(move |vals, g, _| {
                let xv = &vals[xi];
                let mut gx = Mat::zeros(xv.nrows(), xv.ncols());
                for (col, &(src, gate)) in map.iter().enumerate() {
                    for r in 0..xv.nrows() {
                        let gr = g[(r, col)];
                        match gate {
                            None => gx[(r, src)] += gr * silu_d1(xv[(r, src)]),
                            Some(gc) => {
                                let s = sigmoid(xv[(r, gc)]);
                                gx[(r, src)] += gr * s;
                                gx[(r, gc)] += gr * xv[(r, src)] * s * (1.0 - s);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Per-entry RMS normalization with a learned scale per copy.
#[derive(Clone, Debug)]
pub struct EqNorm {
    pub spec: IrrepSpec,
    gamma: usize,
    eps: f64,
}

impl EqNorm {
    pub fn new(name: &str, spec: &IrrepSpec, params: &mut Parameters) -> Self {
        let n = spec.num_copies();
        let gamma = params.add_values(format!("{name}.gamma"), 1, n, vec![1.0; n]);
        EqNorm {
            spec: spec.clone(),
            gamma,
            eps: 1e-6,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, pv: &[Var]) -> Var {
        let spec = self.spec.clone();
        let eps = self.eps;
        let (xv, gv) = (tape.value(x), tape.value(pv[self.gamma]));
        let rows = xv.nrows();
        // rms[r, entry]
        let mut rms = Mat::zeros(rows, spec.entries().len());
        let mut out = Mat::zeros(rows, spec.dim());
        let mut copy0 = 0;
        for (k, e) in spec.entries().iter().enumerate() {
            let range = spec.entry_range(k);
            for r in 0..rows {
                let ss: f64 = range.clone().map(|c| xv[(r, c)] * xv[(r, c)]).sum();
                rms[(r, k)] = (ss / e.mul as f64 + eps).sqrt();
            }
            let d = e.irrep.dim();
            for c in 0..e.mul {
                for m in 0..d {
                    let col = range.start + c * d + m;
                    for r in 0..rows {
                        out[(r, col)] = gv[copy0 + c] * xv[(r, col)] / rms[(r, k)];
                    }
                }
            }
            copy0 += e.mul;
        }
        let (xi, gi) = (x.0, pv[self.gamma].0);
        tape.custom(
            out,
            &[x, pv[self.gamma]],
            Box::new(move |vals, g, need| {
                let (xv, gv) = (&vals[xi], &vals[gi]);
                let mut gx = Mat::zeros(rows, spec.dim());
                let mut gg = Mat::zeros(1, gv.ncols());
                let mut copy0 = 0;
                for (k, e) in spec.entries().iter().enumerate() {
                    let range = spec.entry_range(k);
                    let d = e.irrep.dim();
                    for r in 0..rows {
                        let rr = rms[(r, k)];
                        let mut dot = 0.0;
                        for c in 0..e.mul {
                            for m in 0..d {
                                let col = range.start + c * d + m;
                                dot += g[(r, col)] * gv[copy0 + c] * xv[(r, col)];
                                gg[copy0 + c] += g[(r, col)] * xv[(r, col)] / rr;
                            }
                        }
                        let f = dot / (rr * rr * rr * e.mul as f64);
                        for c in 0..e.mul {
                            for m in 0..d {
                                let col = range.start + c * d + m;
                                gx[(r, col)] = gv[copy0 + c] * g[(r, col)] / rr - xv[(r, col)] * f;
                            }
                        }
                    }
                    copy0 += e.mul;
                }
                vec![need[0].then_some(gx), need[1].then_some(gg)]
            }),
        )
    }
}

#[derive(Clone, Debug)]
struct TpPathSpec {
    ei: usize,
    l2: usize,
    eo: usize,
    cg: Arc<CgTensor>,
    w_off: usize,
}

/// `uvu` tensor product of features with spherical harmonics, each copy
/// weighted per row (edge). Outputs are restricted to `targets`.
#[derive(Clone, Debug)]
pub struct ShTensorProduct {
    pub in_spec: IrrepSpec,
    pub sh_lmax: usize,
    pub out_spec: IrrepSpec,
    paths: Arc<Vec<TpPathSpec>>,
    pub num_weights: usize,
}

impl ShTensorProduct {
    pub fn new(in_spec: &IrrepSpec, sh_lmax: usize, targets: &IrrepSpec) -> Result<Self> {
        let mut paths = Vec::new();
        let mut entries = Vec::new();
        let mut w_off = 0;
        for (ei, e) in in_spec.entries().iter().enumerate() {
            for l2 in 0..=sh_lmax {
                let parity = e.irrep.parity.product(Parity::of_degree(l2));
                for t in targets.entries() {
                    let out = t.irrep;
                    if out.parity != parity || !triangle(e.irrep.l, l2, out.l) {
                        continue;
                    }
                    paths.push(TpPathSpec {
                        ei,
                        l2,
                        eo: entries.len(),
                        cg: clebsch_gordan(e.irrep.l, l2, out.l)?,
                        w_off,
                    });
                    entries.push(IrrepEntry { mul: e.mul, irrep: out });
                    w_off += e.mul;
                }
            }
        }
        if paths.is_empty() {
            return Err(Error::Configuration("tensor product has no admissible path".into()));
        }
        Ok(ShTensorProduct {
            in_spec: in_spec.clone(),
            sh_lmax,
            out_spec: IrrepSpec::new(entries)?,
            paths: Arc::new(paths),
            num_weights: w_off,
        })
    }

    /// `x`: rows × in_spec, `sh`: rows × (lmax+1)², `w`: rows × num_weights.
    pub fn apply(&self, tape: &mut Tape, x: Var, sh: Var, w: Var) -> Var {
        let (xv, yv, wv) = (tape.value(x), tape.value(sh), tape.value(w));
        let rows = xv.nrows();
        let (ins, outs) = (self.in_spec.clone(), self.out_spec.clone());
        let mut out = Mat::zeros(rows, outs.dim());
        for p in self.paths.iter() {
            let ie = ins.entries()[p.ei];
            let (d1, d3) = (ie.irrep.dim(), p.cg.l3 * 2 + 1);
            let (io, oo, yo) = (ins.offset(p.ei), outs.offset(p.eo), p.l2 * p.l2);
            for c in 0..ie.mul {
                for &(m1, m2, m3, v) in p.cg.nonzeros() {
                    let (xc, yc, wc, oc) = (io + c * d1 + m1, yo + m2, p.w_off + c, oo + c * d3 + m3);
                    for r in 0..rows {
                        out[(r, oc)] += v * wv[(r, wc)] * xv[(r, xc)] * yv[(r, yc)];
                    }
                }
            }
        }
        let paths = self.paths.clone();
        let (xi, yi, wi) = (x.0, sh.0, w.0);
        tape.custom(
            out,
            &[x, sh, w],
            Box::new(move |vals, g, need| {
                let (xv, yv, wv) = (&vals[xi], &vals[yi], &vals[wi]);
                let mut gx = need[0].then(|| Mat::zeros(rows, xv.ncols()));
                let mut gy = need[1].then(|| Mat::zeros(rows, yv.ncols()));
                let mut gw = need[2].then(|| Mat::zeros(rows, wv.ncols()));
                for p in paths.iter() {
                    let ie = ins.entries()[p.ei];
                    let (d1, d3) = (ie.irrep.dim(), p.cg.l3 * 2 + 1);
                    let (io, oo, yo) = (ins.offset(p.ei), outs.offset(p.eo), p.l2 * p.l2);
                    for c in 0..ie.mul {
                        for &(m1, m2, m3, v) in p.cg.nonzeros() {
                            let (xc, yc, wc, oc) = (io + c * d1 + m1, yo + m2, p.w_off + c, oo + c * d3 + m3);
                            for r in 0..rows {
                                let gv = v * g[(r, oc)];
                                if let Some(gx) = gx.as_mut() {
                                    gx[(r, xc)] += gv * wv[(r, wc)] * yv[(r, yc)];
                                }
                                if let Some(gy) = gy.as_mut() {
                                    gy[(r, yc)] += gv * wv[(r, wc)] * xv[(r, xc)];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[(r, wc)] += gv * xv[(r, xc)] * yv[(r, yc)];
                                }
                            }
                        }
                    }
                }
                vec![gx, gy, gw]
            }),
        )
    }
}

/// Scale copy `c` of every row by `alpha[row, c % heads]`.
pub fn head_scale(tape: &mut Tape, x: Var, alpha: Var, spec: &IrrepSpec) -> Var {
    let heads = tape.value(alpha).ncols();
    let copies = Arc::new(copy_of_column(spec));
    let (xv, av) = (tape.value(x), tape.value(alpha));
    let mut out = xv.clone();
    for (col, &c) in copies.iter().enumerate() {
        out.column_mut(col).component_mul_assign(&av.column(c % heads));
    }
    let (xi, ai) = (x.0, alpha.0);
    tape.custom(
        out,
        &[x, alpha],
        Box::new(move |vals, g, need| {
            let (xv, av) = (&vals[xi], &vals[ai]);
            let mut gx = need[0].then(|| Mat::zeros(xv.nrows(), xv.ncols()));
            let mut ga = need[1].then(|| Mat::zeros(av.nrows(), av.ncols()));
            for (col, &c) in copies.iter().enumerate() {
                let h = c % heads;
                if let Some(gx) = gx.as_mut() {
                    gx.column_mut(col).copy_from(&g.column(col).component_mul(&av.column(h)));
                }
                if let Some(ga) = ga.as_mut() {
                    let prod = g.column(col).component_mul(&xv.column(col));
                    let mut gc = ga.column_mut(h);
                    gc += prod;
                }
            }
            vec![gx, ga]
        }),
    )
}

/// Transform every row of a feature matrix by an O(3) element.
pub fn transform_rows(x: &Mat, spec: &IrrepSpec, rp: &crate::irreps::RotationParity) -> Mat {
    let mut out = x.clone();
    for r in 0..x.nrows() {
        let arr = crate::irreps::IrrepArray::new(spec.clone(), x.row(r).iter().copied().collect()).unwrap();
        let t = crate::irreps::transform(&arr, rp);
        for (c, v) in t.data().iter().enumerate() {
            out[(r, c)] = *v;
        }
    }
    out
}
