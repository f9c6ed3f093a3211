//! Losses and metrics: trace quantity, real-space loss with γ balancing,
//! projected k-space losses, the closed-form gauge μ, and Gauge MAE.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{BlockSparseHamiltonian, CMatrix, Part, SpinRegion};
use crate::lattice::EdgeKey;
use crate::spectra::ProjectedBlocks;

/// Below this `loss_T` the balancing factor is forced to zero.
pub const GAMMA_GUARD: f64 = 1e-30;
pub const GAUGE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub lambda_pq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.99955,
            lambda_c: 0.2,
            lambda_p: 0.0002,
            lambda_q: 0.0001,
            lambda_pq: 0.00015,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_c, self.lambda_p, self.lambda_q, self.lambda_pq];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Configuration("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_c >= 1.0 {
            return Err(Error::Configuration(format!("lambda_c = {} must be below 1", self.lambda_c)));
        }
        Ok(())
    }

    pub fn k_active(&self) -> bool {
        self.lambda_p > 0.0 || self.lambda_q > 0.0 || self.lambda_pq > 0.0
    }
}

/// Squared Frobenius norm over all spin blocks of one edge.
pub fn trace_quantity(blocks: &[CMatrix]) -> f64 {
    blocks.iter().flat_map(|b| b.iter()).map(|z| z.norm_sqr()).sum()
}

/// Per-edge `‖gt + μS − h0‖²_F`.
pub fn trace_targets(
    gt: &BlockSparseHamiltonian,
    h0: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    mu: f64,
) -> Result<BTreeMap<EdgeKey, f64>> {
    let d = gt.scaled_add(s, mu)?.sub(h0)?;
    Ok(d.iter().map(|(k, b)| (*k, trace_quantity(b))).collect())
}

/// Flat `(residual, overlap)` pairs of `pred − gt` against `S` over every
/// in-graph element, in edge order. Spin-flip elements carry zero overlap.
fn residual_pairs(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    select: Option<(SpinRegion, Part)>,
) -> Result<Vec<(Complex64, Complex64)>> {
    if !pred.same_layout(gt) || !pred.same_layout(s) {
        return Err(Error::Structural(
            "prediction, ground truth and overlap must share an edge set".into(),
        ));
    }
    if pred.is_spinful() != gt.is_spinful() {
        return Err(Error::Structural("prediction and ground truth differ in spin layout".into()));
    }
    if s.is_spinful() {
        return Err(Error::Structural("overlap must be spinless".into()));
    }
    let regions: Vec<SpinRegion> = match select {
        Some((r, _)) => {
            if !pred.is_spinful() && r != SpinRegion::UpUp {
                return Err(Error::Capability(format!(
                    "region {} needs spinful containers",
                    r.symbol()
                )));
            }
            vec![r]
        }
        None if pred.is_spinful() => SpinRegion::ALL.to_vec(),
        None => vec![SpinRegion::UpUp],
    };
    let zero = Complex64::new(0.0, 0.0);
    let mut out = Vec::new();
    for (k, _) in pred.iter() {
        let sb = s.block(k, SpinRegion::UpUp).expect("layout checked");
        for &region in &regions {
            let p = pred.block(k, region).expect("layout checked");
            let g = gt.block(k, region).expect("layout checked");
            for idx in 0..p.len() {
                let r = p[idx] - g[idx];
                let sv = if region.is_spin_flip() { zero } else { sb[idx] };
                out.push(match select {
                    Some((_, part)) => (
                        Complex64::new(part.of(r), 0.0),
                        Complex64::new(part.of(sv), 0.0),
                    ),
                    None => (r, sv),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RLoss {
    pub loss_h: f64,
    pub loss_t: f64,
    pub gamma: f64,
    pub gamma_guarded: bool,
    pub n_r: usize,
}

/// `loss_H = MSE(Ĥ, H_gt + μS)`, `loss_T = MAE(T̂, T_gt(μ))`, `γ = λ_C loss_H / loss_T`.
pub fn loss_r(
    pred: &BlockSparseHamiltonian,
    pred_t: &BTreeMap<EdgeKey, f64>,
    gt: &BlockSparseHamiltonian,
    h0: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    mu: f64,
    w: &LossWeights,
) -> Result<RLoss> {
    let pairs = residual_pairs(pred, gt, s, None)?;
    if pairs.is_empty() {
        return Err(Error::Domain("no in-graph elements".into()));
    }
    let m = Complex64::new(mu, 0.0);
    let loss_h = pairs.iter().map(|(r, s)| (r - m * s).norm_sqr()).sum::<f64>() / pairs.len() as f64;
    let t_gt = trace_targets(gt, h0, s, mu)?;
    let mut loss_t = 0.0;
    for (k, t) in pred_t {
        let target = t_gt
            .get(k)
            .ok_or_else(|| Error::Structural(format!("trace predicted for unknown edge {k:?}")))?;
        loss_t += (t - target).abs();
    }
    if !pred_t.is_empty() {
        loss_t /= pred_t.len() as f64;
    }
    let (gamma, guarded) = balance(loss_h, loss_t, w.lambda_c);
    Ok(RLoss {
        loss_h,
        loss_t,
        gamma,
        gamma_guarded: guarded,
        n_r: pairs.len(),
    })
}

/// `γ = λ_C · loss_H / loss_T`, zero when `loss_T` vanishes.
pub fn balance(loss_h: f64, loss_t: f64, lambda_c: f64) -> (f64, bool) {
    if loss_t < GAMMA_GUARD {
        (0.0, true)
    } else {
        (lambda_c * loss_h / loss_t, false)
    }
}

/// Prediction and ground truth projected into the ground-truth eigenbasis at one k.
#[derive(Clone, Debug)]
pub struct KTerm {
    pub pred: ProjectedBlocks,
    pub gt: ProjectedBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KLoss {
    pub loss_p: f64,
    pub loss_q: f64,
    pub loss_pq: f64,
    pub n_p: usize,
    pub n_q: usize,
    pub n_pq: usize,
    pub p_empty: bool,
}

fn shifted_sq(pred: &CMatrix, gt: &CMatrix, mu: f64) -> f64 {
    let mut acc = 0.0;
    for r in 0..pred.nrows() {
        for c in 0..pred.ncols() {
            let mut d = pred[(r, c)] - gt[(r, c)];
            if r == c {
                d -= mu;
            }
            acc += d.norm_sqr();
        }
    }
    acc
}

/// Projected-block MSEs over all supplied k-points; the ground-truth diagonal
/// blocks carry `+μI`, the PQ target is zero.
pub fn loss_k(terms: &[KTerm], mu: f64) -> KLoss {
    let (mut sp, mut sq, mut spq) = (0.0, 0.0, 0.0);
    let (mut n_p, mut n_q, mut n_pq) = (0, 0, 0);
    for t in terms {
        sp += shifted_sq(&t.pred.pp, &t.gt.pp, mu);
        sq += shifted_sq(&t.pred.qq, &t.gt.qq, mu);
        spq += t.pred.pq.iter().map(|z| z.norm_sqr()).sum::<f64>();
        n_p += t.pred.pp.len();
        n_q += t.pred.qq.len();
        n_pq += t.pred.pq.len();
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    KLoss {
        loss_p: mean(sp, n_p),
        loss_q: mean(sq, n_q),
        loss_pq: mean(spq, n_pq),
        n_p,
        n_q,
        n_pq,
        p_empty: n_p == 0,
    }
}

/// `μ = Δ₁/Δ₂`, the stationary point of the μ-quadratic joint objective.
pub fn solve_mu(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    terms: &[KTerm],
    w: &LossWeights,
) -> Result<f64> {
    let pairs = residual_pairs(pred, gt, s, None)?;
    let n_r = pairs.len() as f64;
    let (mut d1, mut d2) = (0.0, 0.0);
    if w.lambda_r > 0.0 && n_r > 0.0 {
        let num: f64 = pairs.iter().map(|(r, s)| (r.conj() * s).re).sum();
        let den: f64 = pairs.iter().map(|(_, s)| s.norm_sqr()).sum();
        d1 += w.lambda_r / n_r * num;
        d2 += w.lambda_r / n_r * den;
    }
    let kl = loss_k(terms, 0.0);
    let (mut tr_p, mut tr_q, mut bands_p, mut bands_q) = (0.0, 0.0, 0usize, 0usize);
    for t in terms {
        tr_p += (t.pred.pp.trace() - t.gt.pp.trace()).re;
        tr_q += (t.pred.qq.trace() - t.gt.qq.trace()).re;
        bands_p += t.pred.pp.nrows();
        bands_q += t.pred.qq.nrows();
    }
    if w.lambda_p > 0.0 && kl.n_p > 0 {
        d1 += w.lambda_p / kl.n_p as f64 * tr_p;
        d2 += w.lambda_p / kl.n_p as f64 * bands_p as f64;
    }
    if w.lambda_q > 0.0 && kl.n_q > 0 {
        d1 += w.lambda_q / kl.n_q as f64 * tr_q;
        d2 += w.lambda_q / kl.n_q as f64 * bands_q as f64;
    }
    if !(d2 > 0.0) {
        return Err(Error::Configuration(
            "gauge μ is undetermined: need lambda_r > 0 with a non-zero overlap, or an active k-term".into(),
        ));
    }
    Ok(d1 / d2)
}

/// The μ-dependent joint objective `λ_R loss_H + λ_P loss_P + λ_Q loss_Q + λ_PQ loss_PQ`.
pub fn joint_quadratic(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    terms: &[KTerm],
    w: &LossWeights,
    mu: f64,
) -> Result<f64> {
    let pairs = residual_pairs(pred, gt, s, None)?;
    let m = Complex64::new(mu, 0.0);
    let lh = pairs.iter().map(|(r, s)| (r - m * s).norm_sqr()).sum::<f64>() / pairs.len().max(1) as f64;
    let k = loss_k(terms, mu);
    Ok(w.lambda_r * lh + w.lambda_p * k.loss_p + w.lambda_q * k.loss_q + w.lambda_pq * k.loss_pq)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_h: f64,
    pub loss_t: f64,
    pub gamma: f64,
    pub gamma_guarded: bool,
    pub loss_p: f64,
    pub loss_q: f64,
    pub loss_pq: f64,
    pub p_empty: bool,
    pub mu: f64,
    pub total: f64,
    pub n_r: usize,
    pub n_p: usize,
    pub n_q: usize,
    pub n_pq: usize,
}

impl LossBreakdown {
    pub fn new(r: RLoss, k: KLoss, mu: f64, w: &LossWeights) -> Self {
        let mut b = LossBreakdown {
            loss_h: r.loss_h,
            loss_t: r.loss_t,
            gamma: r.gamma,
            gamma_guarded: r.gamma_guarded,
            loss_p: k.loss_p,
            loss_q: k.loss_q,
            loss_pq: k.loss_pq,
            p_empty: k.p_empty,
            mu,
            total: 0.0,
            n_r: r.n_r,
            n_p: k.n_p,
            n_q: k.n_q,
            n_pq: k.n_pq,
        };
        b.total = b.recompute_total(w);
        b
    }

    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        w.lambda_r * ((1.0 - w.lambda_c) * self.loss_h + self.gamma * self.loss_t)
            + w.lambda_p * self.loss_p
            + w.lambda_q * self.loss_q
            + w.lambda_pq * self.loss_pq
    }
}

/// Minimize a convex function on `[lo, hi]` by golden-section search to width `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
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
        if c >= d {
            break;
        }
    }
    0.5 * (a + b)
}

fn gauge_minimize(pairs: &[(Complex64, Complex64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Domain("Gauge MAE over an empty selection".into()));
    }
    let n = pairs.len() as f64;
    let mae = |mu: f64| {
        let m = Complex64::new(mu, 0.0);
        pairs.iter().map(|(r, s)| (r - m * s).norm()).sum::<f64>() / n
    };
    let s_mean = pairs.iter().map(|(_, s)| s.norm()).sum::<f64>() / n;
    if s_mean == 0.0 {
        return Ok((mae(0.0), 0.0));
    }
    let r_max = pairs.iter().map(|(r, _)| r.norm()).fold(0.0, f64::max);
    let bound = 10.0 + r_max / s_mean.max(1e-12);
    let mu = golden_section(&mae, -bound, bound, GAUGE_TOL);
    let (v, v0) = (mae(mu), mae(0.0));
    // never report worse than the plain MAE
    if v0 <= v {
        Ok((v0, 0.0))
    } else {
        Ok((v, mu))
    }
}

/// `min_μ mean |pred − gt − μS|` and its minimizer. Without a region selection
/// the complex modulus over every spin region is averaged; with one, the
/// chosen real or imaginary part.
pub fn gauge_mae(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    select: Option<(SpinRegion, Part)>,
) -> Result<(f64, f64)> {
    gauge_minimize(&residual_pairs(pred, gt, s, select)?)
}

/// Gauge MAE over several samples pooled with one shared μ.
pub fn gauge_mae_pooled(
    samples: &[(&BlockSparseHamiltonian, &BlockSparseHamiltonian, &BlockSparseHamiltonian)],
    select: Option<(SpinRegion, Part)>,
) -> Result<(f64, f64)> {
    let mut pairs = Vec::new();
    for (p, g, s) in samples {
        pairs.extend(residual_pairs(p, g, s, select)?);
    }
    gauge_minimize(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: SpinRegion,
    pub part: Part,
    pub value_mev: f64,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeTable {
    pub rows: Vec<RegionRow>,
    pub overall_mev: f64,
    pub overall_mu: f64,
}

impl GaugeTable {
    pub fn get(&self, region: SpinRegion, part: Part) -> f64 {
        self.rows
            .iter()
            .find(|r| r.region == region && r.part == part)
            .map(|r| r.value_mev)
            .expect("table has every region")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<8}{:>14}{:>14}", "Region", "Real (meV)", "Imag (meV)").unwrap();
        for region in SpinRegion::ALL {
            writeln!(
                s,
                "{:<8}{:>14.3}{:>14.3}",
                region.symbol(),
                self.get(region, Part::Real),
                self.get(region, Part::Imag)
            )
            .unwrap();
        }
        writeln!(s, "{:<8}{:>14.3}", "Overall", self.overall_mev).unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,part,gauge_mae_meV,mu_eV\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.3},{:.10}", r.region.label(), r.part.label(), r.value_mev, r.mu).unwrap();
        }
        writeln!(s, "overall,complex,{:.3},{:.10}", self.overall_mev, self.overall_mu).unwrap();
        s
    }
}

/// Four spin regions × {real, imag} plus Overall, pooled over samples, in meV.
pub fn report_table_pooled(
    samples: &[(&BlockSparseHamiltonian, &BlockSparseHamiltonian, &BlockSparseHamiltonian)],
) -> Result<GaugeTable> {
    if samples.iter().any(|(p, _, _)| !p.is_spinful()) {
        return Err(Error::Capability("report table needs spinful containers".into()));
    }
    let mut rows = Vec::new();
    for region in SpinRegion::ALL {
        for part in [Part::Real, Part::Imag] {
            let (v, mu) = gauge_mae_pooled(samples, Some((region, part)))?;
            rows.push(RegionRow {
                region,
                part,
                value_mev: v * 1e3,
                mu,
            });
        }
    }
    let (v, mu) = gauge_mae_pooled(samples, None)?;
    Ok(GaugeTable {
        rows,
        overall_mev: v * 1e3,
        overall_mu: mu,
    })
}

pub fn report_table(
    pred: &BlockSparseHamiltonian,
    gt: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
) -> Result<GaugeTable> {
    report_table_pooled(&[(pred, gt, s)])
}
