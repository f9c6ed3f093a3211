//! Training loop, Adam with warmup/cosine schedule, evaluation reports and
//! ablation variants.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::TrainSample;
use crate::error::{Error, Result};
use crate::hamiltonian::{assemble_prediction, BlockSparseHamiltonian, CMatrix, DenseKMatrix, SpinRegion};
use crate::lattice::{kmesh, EdgeKey, KPath};
use crate::model::tape::Mat;
use crate::model::{GraphInput, LossGrad, Model, ModelConfig, Prediction};
use crate::objective::{
    gauge_mae_pooled, loss_k, loss_r, report_table_pooled, solve_mu, trace_targets, GaugeTable, KTerm,
    LossBreakdown, LossWeights,
};
use crate::spectra::{bands, ghost_scan, project_blocks, solve_gep, split_pq, BandSet, ProjectedBlocks, SubspaceSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Energy window above the Fermi level spanned by P (eV).
    pub window: f64,
    pub kmesh: [usize; 3],
    pub band_points: usize,
    pub ghost_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            base_lr: 5e-4,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            weights: LossWeights::default(),
            seed: 1,
            window: 10.0,
            kmesh: [2, 2, 2],
            band_points: 40,
            ghost_factor: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup ({} epochs) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            ));
        }
        if [self.base_lr, self.warmup_start_lr, self.min_lr].iter().any(|v| !(*v > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if !(self.clip_norm > 0.0) || !(self.window >= 0.0) {
            return bad("clip norm must be positive and the window non-negative".into());
        }
        if self.kmesh.iter().any(|&n| n == 0) || self.band_points < 2 {
            return bad("k-mesh divisions must be positive and band_points at least 2".into());
        }
        self.weights.validate()
    }

    /// Learning rate at a fractional epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        if epoch < w {
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * epoch / w
        } else {
            let span = (self.epochs as f64 - w).max(f64::MIN_POSITIVE);
            let u = ((epoch - w) / span).clamp(0.0, 1.0);
            self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * u).cos())
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `g` to at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

struct KCache {
    k: Vector3<f64>,
    split: SubspaceSplit,
    gt: ProjectedBlocks,
}

/// A sample with its graph input and cached ground-truth eigenbases.
pub struct Prepared {
    pub sample: TrainSample,
    pub input: GraphInput,
    kcache: Vec<KCache>,
}

impl Prepared {
    pub fn new(model: &Model, sample: TrainSample, cfg: &TrainConfig) -> Result<Self> {
        let input = model.input(&sample.structure, &sample.h0)?;
        let mut kcache = Vec::new();
        if cfg.weights.k_active() {
            for k in kmesh(cfg.kmesh)? {
                let m = DenseKMatrix::assemble(&sample.ht, &sample.s, &k)?;
                let sol = solve_gep(&m)?;
                let split = split_pq(&sol, sample.fermi_level, cfg.window);
                let gt = project_blocks(&m, &split)?;
                kcache.push(KCache { k, split, gt });
            }
        }
        Ok(Prepared { sample, input, kcache })
    }
}

pub fn prepare_all(model: &Model, samples: Vec<TrainSample>, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    samples.into_par_iter().map(|s| Prepared::new(model, s, cfg)).collect()
}

/// `H0` plus the predicted correction on both spin-diagonal blocks.
pub fn predicted_hamiltonian(model: &Model, prep: &Prepared, pred: &Prediction) -> Result<BlockSparseHamiltonian> {
    assemble_prediction(&prep.sample.h0, &prep.input.graph, &pred.corrections, model.config.correction_limit())
}

pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub grad: LossGrad,
}

/// Loss of one prediction and its gradient with respect to the corrections and
/// traces. μ and γ enter the gradient as constants; `frozen` pins them.
pub fn sample_loss(
    model: &Model,
    prep: &Prepared,
    pred: &Prediction,
    w: &LossWeights,
    frozen: Option<(f64, f64)>,
) -> Result<SampleLoss> {
    let smp = &prep.sample;
    let hat = predicted_hamiltonian(model, prep, pred)?;
    let mut terms = Vec::with_capacity(prep.kcache.len());
    for kc in &prep.kcache {
        let m = DenseKMatrix::assemble(&hat, &smp.s, &kc.k)?;
        terms.push(KTerm {
            pred: project_blocks(&m, &kc.split)?,
            gt: kc.gt.clone(),
        });
    }
    let mu = match frozen {
        Some((mu, _)) => mu,
        None => solve_mu(&hat, &smp.ht, &smp.s, &terms, w)?,
    };
    let r = loss_r(&hat, &pred.traces, &smp.ht, &smp.h0, &smp.s, mu, w)?;
    let kl = loss_k(&terms, mu);
    let mut bd = LossBreakdown::new(r, kl, mu, w);
    if let Some((_, gamma)) = frozen {
        bd.gamma = gamma;
        bd.total = bd.recompute_total(w);
    }

    // gradient with respect to the symmetrized blocks
    let mut g: BTreeMap<EdgeKey, Mat> = BTreeMap::new();
    let scale_h = w.lambda_r * (1.0 - w.lambda_c) * 2.0 / bd.n_r as f64;
    for k in pred.corrections.keys() {
        let s = smp.s.block(k, SpinRegion::UpUp).expect("shared layout");
        let mut acc = Mat::zeros(s.nrows(), s.ncols());
        for region in [SpinRegion::UpUp, SpinRegion::DownDown] {
            let p = hat.block(k, region).expect("shared layout");
            let t = smp.ht.block(k, region).expect("shared layout");
            for idx in 0..acc.len() {
                acc[idx] += scale_h * (p[idx] - t[idx] - s[idx] * mu).re;
            }
        }
        g.insert(*k, acc);
    }
    if !prep.kcache.is_empty() {
        let (off, n) = hat.atom_offsets();
        let mean = |l: f64, c: usize| if c == 0 { 0.0 } else { l / c as f64 };
        let (wp, wq, wpq) = (mean(w.lambda_p, kl.n_p), mean(w.lambda_q, kl.n_q), mean(w.lambda_pq, kl.n_pq));
        for (kc, term) in prep.kcache.iter().zip(&terms) {
            let (np, nq) = (kc.split.n_p, kc.split.n_q);
            let mut d = CMatrix::zeros(np + nq, np + nq);
            let muc = Complex64::new(mu, 0.0);
            for a in 0..np {
                for b in 0..np {
                    let mut v = term.pred.pp[(a, b)] - term.gt.pp[(a, b)];
                    if a == b {
                        v -= muc;
                    }
                    d[(a, b)] = v * wp;
                }
                for b in 0..nq {
                    d[(a, np + b)] = term.pred.pq[(a, b)] * wpq;
                }
            }
            for a in 0..nq {
                for b in 0..nq {
                    let mut v = term.pred.qq[(a, b)] - term.gt.qq[(a, b)];
                    if a == b {
                        v -= muc;
                    }
                    d[(np + a, np + b)] = v * wq;
                }
            }
            let q = &kc.split.u * d.adjoint() * kc.split.u.adjoint();
            for (key, acc) in g.iter_mut() {
                let theta = 2.0 * PI * (kc.k.x * key.r[0] as f64 + kc.k.y * key.r[1] as f64 + kc.k.z * key.r[2] as f64);
                let ph = Complex64::from_polar(1.0, theta);
                let (oi, oj) = (off[key.i], off[key.j]);
                for p in 0..acc.nrows() {
                    for c in 0..acc.ncols() {
                        let z = q[(oj + c, oi + p)] + q[(n + oj + c, n + oi + p)];
                        acc[(p, c)] += 2.0 * (ph * z).re;
                    }
                }
            }
        }
    }
    // through the pair symmetrization inside the assembly
    let mut corrections = BTreeMap::new();
    for (k, m) in &g {
        let partner = g.get(&k.conjugate()).ok_or_else(|| {
            Error::Structural(format!("correction for {k:?} lacks its conjugate partner"))
        })?;
        corrections.insert(*k, (m + partner.transpose()) * 0.5);
    }

    let mut traces = BTreeMap::new();
    if !pred.traces.is_empty() && bd.gamma != 0.0 {
        let t_gt = trace_targets(&smp.ht, &smp.h0, &smp.s, mu)?;
        let c = w.lambda_r * bd.gamma / pred.traces.len() as f64;
        for (k, t) in &pred.traces {
            let diff = t - t_gt[k];
            traces.insert(*k, c * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 });
        }
    }
    Ok(SampleLoss {
        breakdown: bd,
        grad: LossGrad {
            value: bd.total,
            corrections,
            traces,
        },
    })
}

/// Total loss and parameter gradient for one sample.
pub fn sample_gradient(
    model: &Model,
    prep: &Prepared,
    w: &LossWeights,
    frozen: Option<(f64, f64)>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut bd = None;
    let (_, _, grad) = model.gradient(&prep.input, |pred| {
        let sl = sample_loss(model, prep, pred, w, frozen)?;
        bd = Some(sl.breakdown);
        Ok(sl.grad)
    })?;
    Ok((bd.expect("loss evaluated"), grad))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: LossBreakdown,
        /// Gauge μ of every sample in the batch.
        mu: Vec<f64>,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_gauge_mae_mev: f64,
        best: bool,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_mev: f64,
    pub final_train_loss: f64,
}

fn mean_breakdown(parts: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.loss_h += p.loss_h / n;
        m.loss_t += p.loss_t / n;
        m.gamma += p.gamma / n;
        m.loss_p += p.loss_p / n;
        m.loss_q += p.loss_q / n;
        m.loss_pq += p.loss_pq / n;
        m.mu += p.mu / n;
        m.total += p.total / n;
        m.n_r += p.n_r;
        m.n_p += p.n_p;
        m.n_q += p.n_q;
        m.n_pq += p.n_pq;
        m.gamma_guarded |= p.gamma_guarded;
        m.p_empty |= p.p_empty;
    }
    let _ = w;
    m
}

/// Pooled overall Gauge MAE of the model's predictions (meV).
pub fn validation_mae(model: &Model, set: &[Prepared]) -> Result<f64> {
    let preds: Vec<BlockSparseHamiltonian> = set
        .par_iter()
        .map(|p| predicted_hamiltonian(model, p, &model.predict(&p.input)?))
        .collect::<Result<_>>()?;
    let triples: Vec<_> = preds.iter().zip(set).map(|(h, p)| (h, &p.sample.ht, &p.sample.s)).collect();
    Ok(gauge_mae_pooled(&triples, None)?.0 * 1e3)
}

struct LogSink(Option<std::fs::File>, std::path::PathBuf);

impl LogSink {
    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(f) = &mut self.0 {
            let line = serde_json::to_string(rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

/// Train in place. Writes `train_log.jsonl`, `best.json` and `last.json` to
/// `out_dir` when given; the model ends holding the best-on-validation weights.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &[Prepared],
    val_set: &[Prepared],
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Configuration("training and validation sets must be non-empty".into()));
    }
    let log_path = out_dir.map(|d| d.join("train_log.jsonl")).unwrap_or_default();
    let mut sink = LogSink(
        match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                Some(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?)
            }
            None => None,
        },
        log_path,
    );
    let meta = |epoch: usize, val: f64| serde_json::json!({"epoch": epoch, "val_gauge_mae_meV": val, "train": cfg});
    let n = model.params.len();
    let mut adam = Adam::new(n, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut best = (usize::MAX, f64::INFINITY);
    let mut best_values = model.params.values.clone();
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.lr_at(epoch as f64 + b as f64 / steps_per_epoch as f64);
            let results: Vec<(LossBreakdown, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sample_gradient(model, &train_set[i], &cfg.weights, None))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; n];
            for (_, g) in &results {
                for (a, x) in grad.iter_mut().zip(g) {
                    *a += x / batch.len() as f64;
                }
            }
            let parts: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
            let mean = mean_breakdown(&parts, &cfg.weights);
            if !mean.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                if let Some(d) = out_dir {
                    model.save(&d.join("last_good.json"), meta(epoch, f64::NAN))?;
                    let dump = serde_json::json!({
                        "step": step,
                        "epoch": epoch,
                        "samples": batch.iter().map(|&i| train_set[i].sample.name.clone()).collect::<Vec<_>>(),
                        "losses": parts,
                    });
                    let p = d.join("nan_dump.json");
                    std::fs::write(&p, serde_json::to_string_pretty(&dump).expect("serializes"))
                        .map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at step {step} (epoch {epoch}); last good weights kept"
                )));
            }
            let gn = clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(&mut model.params.values, &grad, lr);
            sink.write(&LogRecord::Step {
                step,
                epoch,
                lr,
                loss: mean,
                mu: parts.iter().map(|p| p.mu).collect(),
                grad_norm: gn,
            })?;
            epoch_loss += mean.total * batch.len() as f64 / train_set.len() as f64;
            step += 1;
        }
        last_loss = epoch_loss;
        let val = validation_mae(model, val_set)?;
        let is_best = val < best.1;
        if is_best {
            best = (epoch, val);
            best_values = model.params.values.clone();
            if let Some(d) = out_dir {
                model.save(&d.join("best.json"), meta(epoch, val))?;
            }
        }
        sink.write(&LogRecord::Epoch {
            epoch,
            train_loss: epoch_loss,
            val_gauge_mae_mev: val,
            best: is_best,
        })?;
    }
    if let Some(d) = out_dir {
        model.save(&d.join("last.json"), meta(cfg.epochs - 1, f64::NAN))?;
    }
    model.params.values = best_values;
    Ok(TrainSummary {
        steps: step,
        best_epoch: best.0,
        best_val_mev: best.1,
        final_train_loss: last_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementRow {
    pub element: String,
    pub structures: usize,
    pub pred_mev: f64,
    pub h0_mev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub table: GaugeTable,
    pub baseline: GaugeTable,
    /// Gauge MAE of an all-zero prediction (meV).
    pub zero_mev: f64,
    pub per_element: Vec<ElementRow>,
    /// In-window band RMSE after removing each structure's mean offset (meV).
    pub band_rmse_mev: f64,
    pub band_rmse_h0_mev: f64,
    pub ghost_flags: usize,
    pub ghost_flags_h0: usize,
}

impl EvalReport {
    pub fn overall_mev(&self) -> f64 {
        self.table.overall_mev
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "Gauge MAE over {} structures", self.samples).unwrap();
        s.push_str(&self.table.to_text());
        writeln!(s, "H0 baseline overall {:>10.3} meV", self.baseline.overall_mev).unwrap();
        writeln!(s, "zero baseline overall {:>8.3} meV", self.zero_mev).unwrap();
        writeln!(s, "{:<10}{:>8}{:>14}{:>14}", "Element", "count", "pred (meV)", "H0 (meV)").unwrap();
        for r in &self.per_element {
            writeln!(s, "{:<10}{:>8}{:>14.3}{:>14.3}", r.element, r.structures, r.pred_mev, r.h0_mev).unwrap();
        }
        writeln!(s, "band RMSE {:.3} meV (H0: {:.3} meV)", self.band_rmse_mev, self.band_rmse_h0_mev).unwrap();
        writeln!(s, "ghost-flagged k-points {} (H0: {})", self.ghost_flags, self.ghost_flags_h0).unwrap();
        s
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = self.table.to_csv();
        writeln!(s, "baseline_overall_meV,{:.3}", self.baseline.overall_mev).unwrap();
        writeln!(s, "zero_overall_meV,{:.3}", self.zero_mev).unwrap();
        writeln!(s, "band_rmse_meV,{:.3}", self.band_rmse_mev).unwrap();
        writeln!(s, "band_rmse_h0_meV,{:.3}", self.band_rmse_h0_mev).unwrap();
        writeln!(s, "ghost_flags,{}", self.ghost_flags).unwrap();
        writeln!(s, "ghost_flags_h0,{}", self.ghost_flags_h0).unwrap();
        writeln!(s, "element,structures,pred_meV,h0_meV").unwrap();
        for r in &self.per_element {
            writeln!(s, "{},{},{:.3},{:.3}", r.element, r.structures, r.pred_mev, r.h0_mev).unwrap();
        }
        s
    }
}

/// Default band path in fractional coordinates.
pub fn default_kpath(points: usize) -> Result<KPath> {
    KPath::through(
        &[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]],
        points,
    )
}

fn band_errors(gt: &BandSet, pred: &BandSet, fermi: f64, window: f64) -> Vec<f64> {
    let mut diffs = Vec::new();
    for (a, b) in gt.energies.iter().zip(&pred.energies) {
        for (x, y) in a.iter().zip(b) {
            if *x <= fermi + window {
                diffs.push(y - x);
            }
        }
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    diffs.iter().map(|d| d - mean).collect()
}

/// Report for arbitrary predicted Hamiltonians, one per sample.
pub fn evaluate_predictions(
    samples: &[&TrainSample],
    preds: &[BlockSparseHamiltonian],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != preds.len() {
        return Err(Error::Structural("need one prediction per sample".into()));
    }
    let triples: Vec<_> = preds.iter().zip(samples).map(|(p, s)| (p, &s.ht, &s.s)).collect();
    let base: Vec<_> = samples.iter().map(|s| (&s.h0, &s.ht, &s.s)).collect();
    let zeros: Vec<BlockSparseHamiltonian> = samples
        .iter()
        .map(|s| BlockSparseHamiltonian::zeros(s.ht.basis().clone(), s.ht.species().to_vec(), s.ht.keys().copied().collect::<Vec<_>>(), true))
        .collect::<Result<_>>()?;
    let zero_triples: Vec<_> = zeros.iter().zip(samples).map(|(z, s)| (z, &s.ht, &s.s)).collect();
    let table = report_table_pooled(&triples)?;
    let baseline = report_table_pooled(&base)?;
    let zero_mev = gauge_mae_pooled(&zero_triples, None)?.0 * 1e3;

    let mut elements: Vec<String> = samples[0].ht.basis().elements().map(|(e, _)| e.clone()).collect();
    elements.sort();
    let mut per_element = Vec::new();
    for e in elements {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].structure.species.contains(&e)).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<_> = idx.iter().map(|&i| triples[i]).collect();
        let b: Vec<_> = idx.iter().map(|&i| base[i]).collect();
        per_element.push(ElementRow {
            element: e,
            structures: idx.len(),
            pred_mev: gauge_mae_pooled(&p, None)?.0 * 1e3,
            h0_mev: gauge_mae_pooled(&b, None)?.0 * 1e3,
        });
    }

    let path = default_kpath(cfg.band_points)?;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, usize, usize)> = samples
        .par_iter()
        .zip(preds.par_iter())
        .map(|(s, p)| {
            let gt = bands(&s.ht, &s.s, &s.structure, &path)?;
            let pb = bands(p, &s.s, &s.structure, &path)?;
            let hb = bands(&s.h0, &s.s, &s.structure, &path)?;
            let errs = band_errors(&gt, &pb, s.fermi_level, cfg.window);
            let errs0 = band_errors(&gt, &hb, s.fermi_level, cfg.window);
            let g = ghost_scan(&gt, &pb, s.fermi_level, cfg.window, cfg.ghost_factor)?.len();
            let g0 = ghost_scan(&gt, &hb, s.fermi_level, cfg.window, cfg.ghost_factor)?.len();
            Ok((errs, errs0, g, g0))
        })
        .collect::<Result<_>>()?;
    let (mut sq, mut sq0, mut cnt, mut ghosts, mut ghosts0) = (0.0, 0.0, 0usize, 0, 0);
    for (errs, errs0, g, g0) in &per_sample {
        sq += errs.iter().map(|e| e * e).sum::<f64>();
        sq0 += errs0.iter().map(|e| e * e).sum::<f64>();
        cnt += errs.len();
        ghosts += g;
        ghosts0 += g0;
    }
    Ok(EvalReport {
        samples: samples.len(),
        table,
        baseline,
        zero_mev,
        per_element,
        band_rmse_mev: (sq / cnt.max(1) as f64).sqrt() * 1e3,
        band_rmse_h0_mev: (sq0 / cnt.max(1) as f64).sqrt() * 1e3,
        ghost_flags: ghosts,
        ghost_flags_h0: ghosts0,
    })
}

/// Evaluate a model; `enabled` switches sub-models off, which is an error
/// whenever a disabled interval still claims edges.
pub fn evaluate(model: &Model, set: &[Prepared], cfg: &TrainConfig, enabled: &[bool]) -> Result<EvalReport> {
    for p in set {
        for (m, edges) in model.assignment(&p.input).iter().enumerate() {
            if !edges.is_empty() && !enabled.get(m).copied().unwrap_or(true) {
                let [lo, hi] = model.config.ensemble_intervals[m];
                return Err(Error::Capability(format!(
                    "sub-model {m} for [{lo}, {hi}) Å is unavailable but structure {:?} has edges in it",
                    p.sample.name
                )));
            }
        }
    }
    let preds: Vec<BlockSparseHamiltonian> = set
        .par_iter()
        .map(|p| predicted_hamiltonian(model, p, &model.predict_enabled(&p.input, enabled)?))
        .collect::<Result<_>>()?;
    let samples: Vec<&TrainSample> = set.iter().map(|p| &p.sample).collect();
    evaluate_predictions(&samples, &preds, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Input,
    Output,
    Tracegrad,
    Ensemble,
    LossK,
    LossPq,
}

impl Variant {
    pub const ABLATIONS: [Variant; 6] = [
        Variant::Input,
        Variant::Output,
        Variant::Tracegrad,
        Variant::Ensemble,
        Variant::LossK,
        Variant::LossPq,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full Method",
            Variant::Input => "Ablation@Input",
            Variant::Output => "Ablation@Output",
            Variant::Tracegrad => "Ablation@TraceGrad",
            Variant::Ensemble => "Ablation@Ensemble",
            Variant::LossK => "Ablation@Loss-k",
            Variant::LossPq => "Ablation@Loss-PQ",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "input" => Variant::Input,
            "output" => Variant::Output,
            "tracegrad" => Variant::Tracegrad,
            "ensemble" => Variant::Ensemble,
            "loss_k" => Variant::LossK,
            "loss_pq" => Variant::LossPq,
            _ => {
                return Err(Error::Configuration(format!(
                    "unknown variant {s:?}; expected one of input, output, tracegrad, ensemble, loss_k, loss_pq"
                )))
            }
        })
    }

    /// Configurations of this variant derived from the full method.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::Input => m.element_embedding = true,
            Variant::Output => m.direct_target = true,
            Variant::Tracegrad => {
                m.tracegrad = false;
                t.weights.lambda_c = 0.0;
            }
            Variant::Ensemble => m.ensemble_intervals = vec![[0.0, model.correction_limit()]],
            Variant::LossK => {
                t.weights.lambda_p = 0.0;
                t.weights.lambda_q = 0.0;
                t.weights.lambda_pq = 0.0;
            }
            Variant::LossPq => t.weights.lambda_pq = 0.0,
        }
        (m, t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub summary: TrainSummary,
}

/// Train a variant from scratch under the given seed and evaluate it.
pub fn run_variant(
    variant: Variant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    basis: &crate::hamiltonian::OrbitalBasis,
    data: (&[TrainSample], &[TrainSample], &[TrainSample]),
    out_dir: Option<&Path>,
) -> Result<AblationRow> {
    let (mc, tc) = variant.apply(model_cfg, train_cfg);
    let mut model = Model::new(mc, basis.clone(), tc.seed)?;
    let tr = prepare_all(&model, data.0.to_vec(), &tc)?;
    let va = prepare_all(&model, data.1.to_vec(), &tc)?;
    let te = prepare_all(&model, data.2.to_vec(), &tc)?;
    let summary = train(&mut model, &tc, &tr, &va, out_dir)?;
    let report = evaluate(&model, &te, &tc, &[])?;
    Ok(AblationRow { variant, report, summary })
}

/// Table-4 style comparison.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<22}{:>12}{:>12}{:>12}{:>12}{:>12}{:>8}",
        "Method", "Overall", "uu real", "uu imag", "ud real", "ud imag", "ghosts"
    )
    .unwrap();
    use crate::hamiltonian::Part;
    for r in rows {
        let t = &r.report.table;
        writeln!(
            s,
            "{:<22}{:>12.3}{:>12.3}{:>12.3}{:>12.3}{:>12.3}{:>8}",
            r.variant.label(),
            t.overall_mev,
            t.get(SpinRegion::UpUp, Part::Real),
            t.get(SpinRegion::UpUp, Part::Imag),
            t.get(SpinRegion::UpDown, Part::Real),
            t.get(SpinRegion::UpDown, Part::Imag),
            r.report.ghost_flags
        )
        .unwrap();
    }
    s
}
