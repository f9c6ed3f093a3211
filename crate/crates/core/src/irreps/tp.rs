use std::sync::Arc;

use super::cg::{clebsch_gordan, triangle, CgTensor};
use super::spec::{IrrepArray, IrrepSpec};
use crate::error::{Error, Result};

/// One coupling path `in1[entry1] ⊗ in2[entry2] -> out[entry_out]`.
#[derive(Debug, Clone)]
pub struct TpPath {
    pub in1: usize,
    pub in2: usize,
    pub out: usize,
    /// Offset of this path's `mul1 * mul2 * mul_out` weights.
    pub weight_offset: usize,
    cg: Arc<CgTensor>,
}

/// Fully connected equivariant tensor product with one learnable weight per
/// `(copy1, copy2, copy_out)` triple of every allowed path.
#[derive(Debug, Clone)]
pub struct TensorProduct {
    in1: IrrepSpec,
    in2: IrrepSpec,
    out: IrrepSpec,
    paths: Vec<TpPath>,
    num_weights: usize,
}

impl TensorProduct {
    pub fn new(in1: IrrepSpec, in2: IrrepSpec, out: IrrepSpec) -> Result<Self> {
        let mut paths = Vec::new();
        let mut offset = 0;
        for (o, eo) in out.entries().iter().enumerate() {
            let mut reached = false;
            for (a, ea) in in1.entries().iter().enumerate() {
                for (b, eb) in in2.entries().iter().enumerate() {
                    let (ia, ib, io) = (ea.irrep, eb.irrep, eo.irrep);
                    if !triangle(ia.l, ib.l, io.l) || ia.parity.product(ib.parity) != io.parity {
                        continue;
                    }
                    reached = true;
                    paths.push(TpPath {
                        in1: a,
                        in2: b,
                        out: o,
                        weight_offset: offset,
                        cg: clebsch_gordan(ia.l, ib.l, io.l)?,
                    });
                    offset += ea.mul * eb.mul * eo.mul;
                }
            }
            if !reached {
                return Err(Error::Configuration(format!(
                    "output irrep {}x{} (entry {o}) is unreachable from {} ⊗ {}",
                    eo.mul, eo.irrep, in1, in2
                )));
            }
        }
        Ok(TensorProduct {
            in1,
            in2,
            out,
            paths,
            num_weights: offset,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.num_weights
    }

    pub fn paths(&self) -> &[TpPath] {
        &self.paths
    }

    pub fn out_spec(&self) -> &IrrepSpec {
        &self.out
    }

    pub fn apply(&self, x: &IrrepArray, y: &IrrepArray, weights: &[f64]) -> Result<IrrepArray> {
        if x.spec() != &self.in1 || y.spec() != &self.in2 {
            return Err(Error::Structural(format!(
                "tensor product expects {} ⊗ {}, got {} ⊗ {}",
                self.in1,
                self.in2,
                x.spec(),
                y.spec()
            )));
        }
        if weights.len() != self.num_weights {
            return Err(Error::Structural(format!(
                "expected {} weights, got {}",
                self.num_weights,
                weights.len()
            )));
        }
        let mut out = IrrepArray::zeros(self.out.clone());
        let mut buf = Vec::new();
        for p in &self.paths {
            let (m1, m2, mo) = (
                self.in1.entries()[p.in1].mul,
                self.in2.entries()[p.in2].mul,
                self.out.entries()[p.out].mul,
            );
            let d3 = self.out.entries()[p.out].irrep.dim();
            for u in 0..m1 {
                for v in 0..m2 {
                    buf.clear();
                    buf.resize(d3, 0.0);
                    p.cg.couple_into(x.block(p.in1, u), y.block(p.in2, v), 1.0, &mut buf);
                    for w in 0..mo {
                        let wt = weights[p.weight_offset + (u * m2 + v) * mo + w];
                        if wt == 0.0 {
                            continue;
                        }
                        for (o, b) in out.block_mut(p.out, w).iter_mut().zip(&buf) {
                            *o += wt * b;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
