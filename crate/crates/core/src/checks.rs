//! Invariant suite shared by the `check` command and the acceptance target.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{gen_sample, one_band_chain, random_structure, sample_rng, GeneratorConfig, Material, TrainSample};
use crate::error::Result;
use crate::hamiltonian::{orbital_rotation, BlockSparseHamiltonian, CMatrix, DenseKMatrix, SpinRegion};
use crate::irreps::{IrrepSpec, RotationParity};
use crate::lattice::{kmesh, sample_kpath, CrystalStructure, EdgeKey, KPath};
use crate::model::params::{Init, Parameters};
use crate::model::tape::{Mat, Tape, Var};
use crate::model::tracegrad::TraceGrad;
use crate::model::{Model, ModelConfig};
use crate::objective::{gauge_mae, solve_mu, KTerm, LossWeights};
use crate::oracle::{golden_section_dd, joint_quadratic_dd};
use crate::spectra::{
    bands, check_error_bound, ghost_scan, hermitian_eigen, max_abs, project_blocks, solve_gep, split_pq, BandSet,
};
use crate::trainkit::{prepare_all, sample_gradient, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Problem sizes of the suite.
#[derive(Clone, Copy, Debug)]
pub struct Scale {
    pub structures: usize,
    pub group_elements: usize,
    pub tracegrad_probes: usize,
    pub param_probes: usize,
    pub mu_instances: usize,
    pub bound_instances: usize,
    pub pq_samples: usize,
}

impl Scale {
    pub fn full() -> Self {
        Scale {
            structures: 100,
            group_elements: 20,
            tracegrad_probes: 50,
            param_probes: 40,
            mu_instances: 200,
            bound_instances: 500,
            pq_samples: 60,
        }
    }

    pub fn quick() -> Self {
        Scale {
            structures: 5,
            group_elements: 4,
            tracegrad_probes: 20,
            param_probes: 12,
            mu_instances: 20,
            bound_instances: 50,
            pq_samples: 5,
        }
    }
}

fn timed(id: u32, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        id,
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Generator used throughout the suite: small cells with SOC and short cutoffs.
pub fn suite_generator() -> GeneratorConfig {
    GeneratorConfig {
        atoms_min: 2,
        atoms_max: 3,
        graph_cutoff: 4.5,
        hopping_cutoff: 4.5,
        correction_cutoff: 4.0,
        seed: 11,
        ..Default::default()
    }
}

/// Small model used by the suite.
pub fn suite_model() -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        feature_spec: "8x0e+4x1o+4x1e+2x2e+2x2o+1x3e+1x3o+1x4e".parse().expect("static spec"),
        n_heads: 2,
        gaussian_basis: 8,
        invariant_dim: 12,
        cutoff: 4.0,
        ensemble_intervals: vec![[0.0, 1.0], [1.0, 2.5], [2.5, 4.0]],
        sh_lmax: 2,
        attention_hidden: 8,
        ..Default::default()
    }
}

/// Uniform noise on every parameter, so that a freshly built model (whose
/// decoder starts at zero) produces non-trivial output.
pub fn jitter(model: &mut Model, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.params.values.iter_mut() {
        *v += amp * (rng.gen::<f64>() * 2.0 - 1.0);
    }
}

pub fn run_all(scale: &Scale) -> Vec<CheckResult> {
    vec![
        equivariance(scale),
        tracegrad_gradcheck(scale),
        parameter_gradcheck(scale),
        mu_oracle(scale),
        gauge_invariance(),
        gauge_spectral_identity(),
        error_bound(scale),
        pq_identity(scale),
        one_band(),
        ghost_detection(),
    ]
}

/// Structure under `rp` and the per-atom image shift introduced by re-wrapping.
pub fn transform_structure(st: &CrystalStructure, rp: &RotationParity) -> (CrystalStructure, Vec<[i32; 3]>) {
    let mut out = st.clone();
    out.lattice = st.lattice * rp.rotation().transpose();
    let mut shift = vec![[0; 3]; st.num_atoms()];
    if rp.has_inversion() {
        out.frac_coords = st.frac_coords.iter().map(|f| CrystalStructure::wrap(-f)).collect();
        for (i, (a, b)) in st.frac_coords.iter().zip(&out.frac_coords).enumerate() {
            shift[i] = [0, 1, 2].map(|c| (a[c] + b[c]).round() as i32);
        }
    }
    (out, shift)
}

/// Max relative block covariance error over random rotations, parities,
/// translations and permutations.
pub fn equivariance(scale: &Scale) -> CheckResult {
    timed(1, "equivariance", || {
        let g = suite_generator();
        let mat = Material::generate(&g)?;
        let mut model = Model::new(suite_model(), mat.basis.clone(), 1)?;
        jitter(&mut model, 2, 0.05);
        let mut worst = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for s in 0..scale.structures {
            let st = random_structure(&g, &mut sample_rng(g.seed, s as u64))?;
            let h0 = crate::datagen::build_hamiltonians(&g, &mat, &st)?.0;
            let base = model.predict(&model.input(&st, &h0)?)?;
            let scale_b = base.corrections.values().map(|b| b.amax()).fold(1e-12, f64::max);
            let n = st.num_atoms();
            for _ in 0..scale.group_elements {
                let rp = RotationParity::from_uniforms([rng.gen(), rng.gen(), rng.gen()], rng.gen_bool(0.5));
                let (mut st2, s1) = transform_structure(&st, &rp);
                let t = Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen());
                let mut s2 = vec![[0i32; 3]; n];
                for i in 0..n {
                    let moved = st2.frac_coords[i] + t;
                    st2.frac_coords[i] = CrystalStructure::wrap(moved);
                    s2[i] = [0, 1, 2].map(|c| (moved[c] - st2.frac_coords[i][c]).round() as i32);
                }
                let mut sigma: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    sigma.swap(i, rng.gen_range(0..=i));
                }
                let mut st3 = st2.clone();
                for i in 0..n {
                    st3.species[sigma[i]] = st2.species[i].clone();
                    st3.frac_coords[sigma[i]] = st2.frac_coords[i];
                }
                let h0b = crate::datagen::build_hamiltonians(&g, &mat, &st3)?.0;
                let pred = model.predict(&model.input(&st3, &h0b)?)?;
                let d: Vec<DMatrix<f64>> =
                    st.species.iter().map(|e| orbital_rotation(&mat.basis, e, &rp)).collect::<Result<_>>()?;
                for (k, b) in &base.corrections {
                    let r1 = if rp.has_inversion() {
                        [0, 1, 2].map(|c| -k.r[c] + s1[k.i][c] - s1[k.j][c])
                    } else {
                        k.r
                    };
                    let r2 = [0, 1, 2].map(|c| r1[c] + s2[k.j][c] - s2[k.i][c]);
                    let key = EdgeKey::new(sigma[k.i], sigma[k.j], r2);
                    let Some(got) = pred.corrections.get(&key) else {
                        return Ok((false, format!("edge {k:?} has no image {key:?}")));
                    };
                    let want = &d[k.i] * b * d[k.j].transpose();
                    worst = worst.max((want - got).amax() / scale_b);
                }
            }
        }
        Ok((
            worst < 1e-7,
            format!(
                "{}x{} elements, max relative error {worst:.2e} (tol 1e-7)",
                scale.structures, scale.group_elements
            ),
        ))
    })
}

/// Delivered TraceGrad features against finite differences of `Σz`.
pub fn tracegrad_gradcheck(scale: &Scale) -> CheckResult {
    timed(2, "tracegrad gradcheck", || {
        let spec: IrrepSpec = "3x0e+2x1o+1x1e+2x2e+1x0o".parse()?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Parameters::default();
        let tg = TraceGrad::new("tg", &spec, 6, &mut p, &mut rng);
        p.add("pad", 1, 1, Init::Zeros, &mut rng);
        let mats: Vec<Mat> =
            p.registry.iter().enumerate().map(|(i, e)| Mat::from_row_slice(e.rows, e.cols, p.slice(i))).collect();
        let x = Mat::from_fn(4, spec.dim(), |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let consts = |t: &mut Tape| -> Vec<Var> { mats.iter().map(|m| t.constant(m.clone())).collect() };
        let mut t = Tape::new();
        let pv = consts(&mut t);
        let f = t.constant(x.clone());
        let ov = tg.deliver(&mut t, f, &pv);
        let delivered = t.value(ov).clone() - &x;
        let sum_z = |x: &Mat| {
            let mut t = Tape::new();
            let pv = consts(&mut t);
            let f = t.constant(x.clone());
            let z = tg.z(&mut t, f, &pv);
            t.value(z).sum()
        };
        let scale_g = delivered.amax().max(1e-12);
        let mut worst = 0.0f64;
        for _ in 0..scale.tracegrad_probes {
            let idx = rng.gen_range(0..x.len());
            let h = 1e-6 * x[idx].abs().max(1.0);
            let (mut a, mut b) = (x.clone(), x.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (sum_z(&a) - sum_z(&b)) / (2.0 * h);
            worst = worst.max((fd - delivered[idx]).abs() / fd.abs().max(1e-2 * scale_g));
        }
        Ok((
            worst <= 1e-4,
            format!("{} probes, max relative error {worst:.2e} (tol 1e-4)", scale.tracegrad_probes),
        ))
    })
}

/// Full training loss against finite differences in parameter space, with μ
/// and γ held at their values at the base point.
pub fn parameter_gradcheck(scale: &Scale) -> CheckResult {
    timed(2, "full-loss parameter gradcheck", || {
        let g = GeneratorConfig {
            atoms_max: 2,
            seed: 5,
            ..suite_generator()
        };
        let mat = Material::generate(&g)?;
        let smp = gen_sample(&g, &mat, &mut sample_rng(g.seed, 0))?;
        let mut model = Model::new(suite_model(), mat.basis.clone(), 3)?;
        jitter(&mut model, 4, 0.05);
        let w = LossWeights {
            lambda_r: 0.6,
            lambda_p: 0.2,
            lambda_q: 0.1,
            lambda_pq: 0.1,
            ..LossWeights::default()
        };
        let tc = TrainConfig { weights: w, ..Default::default() };
        let prep = prepare_all(&model, vec![smp], &tc)?;
        let (bd, grad) = sample_gradient(&model, &prep[0], &w, None)?;
        let frozen = Some((bd.mu, bd.gamma));
        let scale_g = grad.iter().fold(1e-12f64, |a, g| a.max(g.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0f64;
        for _ in 0..scale.param_probes {
            let idx = rng.gen_range(0..grad.len());
            let x = model.params.values[idx];
            let h = 1e-5 * x.abs().max(1.0);
            model.params.values[idx] = x + h;
            let lp = sample_gradient(&model, &prep[0], &w, frozen)?.0.total;
            model.params.values[idx] = x - h;
            let lm = sample_gradient(&model, &prep[0], &w, frozen)?.0.total;
            model.params.values[idx] = x;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad[idx]).abs() / grad[idx].abs().max(0.05 * scale_g));
        }
        Ok((
            worst <= 1e-3,
            format!("{} probes on a 2-atom cell, max relative error {worst:.2e} (tol 1e-3)", scale.param_probes),
        ))
    })
}

fn suite_samples(n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let g = GeneratorConfig { seed, ..suite_generator() };
    let mat = Material::generate(&g)?;
    (0..n).map(|i| gen_sample(&g, &mat, &mut sample_rng(g.seed, i as u64))).collect()
}

/// `H^T + cS + e (H0 - H^T)`.
fn perturbed(s: &TrainSample, c: f64, e: f64) -> Result<BlockSparseHamiltonian> {
    s.ht.scaled_add(&s.s, c)?.scaled_add(&s.h0, e)?.scaled_add(&s.ht, -e)
}

/// Closed-form μ against golden-section minimization of the joint objective
/// evaluated in double-double arithmetic.
pub fn mu_oracle(scale: &Scale) -> CheckResult {
    timed(3, "analytic mu oracle", || {
        let samples = suite_samples(10, 21)?;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut worst = 0.0f64;
        for inst in 0..scale.mu_instances {
            let smp = &samples[inst % samples.len()];
            let pred = perturbed(smp, rng.gen_range(-3.0..3.0), rng.gen_range(0.0..1.0))?;
            let window = rng.gen_range(0.0..6.0);
            let mut terms = Vec::new();
            for k in kmesh([2, 1, 1])? {
                let gt = DenseKMatrix::assemble(&smp.ht, &smp.s, &k)?;
                let split = split_pq(&solve_gep(&gt)?, smp.fermi_level, window);
                let pm = DenseKMatrix::assemble(&pred, &smp.s, &k)?;
                terms.push(KTerm {
                    pred: project_blocks(&pm, &split)?,
                    gt: project_blocks(&gt, &split)?,
                });
            }
            let w = LossWeights {
                lambda_r: rng.gen_range(0.05..1.0),
                lambda_c: 0.2,
                lambda_p: rng.gen_range(0.0..0.5),
                lambda_q: rng.gen_range(0.0..0.5),
                lambda_pq: rng.gen_range(0.0..0.5),
            };
            let mu = solve_mu(&pred, &smp.ht, &smp.s, &terms, &w)?;
            let f = |m: f64| joint_quadratic_dd(&pred, &smp.ht, &smp.s, &terms, &w, m).expect("shared layout");
            let oracle = golden_section_dd(f, -50.0, 50.0, 1e-12);
            worst = worst.max((mu - oracle).abs());
        }
        Ok((
            worst < 1e-8,
            format!("{} instances, max |mu - oracle| {worst:.2e} eV (tol 1e-8)", scale.mu_instances),
        ))
    })
}

/// Mean complex residual modulus over all four spin regions at shift μ.
fn overall_mae_at(pred: &BlockSparseHamiltonian, gt: &BlockSparseHamiltonian, s: &BlockSparseHamiltonian, mu: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for k in pred.keys() {
        for region in SpinRegion::ALL {
            let (p, g) = (pred.block(k, region).expect("key"), gt.block(k, region).expect("key"));
            let sb = if region.is_spin_flip() { None } else { s.block(k, SpinRegion::UpUp) };
            for idx in 0..p.len() {
                let so = sb.map_or(Complex64::new(0.0, 0.0), |b| b[idx]);
                sum += (p[idx] - g[idx] - so * mu).norm();
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Iteratively refined grid scan.
fn grid_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..40 {
        let n = 200;
        let step = (hi - lo) / n as f64;
        let (mut arg, mut val) = (lo, f64::INFINITY);
        for i in 0..=n {
            let x = lo + step * i as f64;
            let v = f(x);
            if v < val {
                (arg, val) = (x, v);
            }
        }
        best = best.min(val);
        lo = arg - 2.0 * step;
        hi = arg + 2.0 * step;
    }
    best
}

pub fn gauge_invariance() -> CheckResult {
    timed(4, "gauge MAE invariance", || {
        let samples = suite_samples(3, 41)?;
        let (mut worst_shift, mut worst_grid) = (0.0f64, 0.0f64);
        for (i, smp) in samples.iter().enumerate() {
            let pred = perturbed(smp, 0.3 * i as f64 - 0.2, 0.7)?;
            let (base, mu0) = gauge_mae(&pred, &smp.ht, &smp.s, None)?;
            for c in [10.0, -10.0, 0.1, -0.1] {
                let (v, _) = gauge_mae(&pred.scaled_add(&smp.s, c)?, &smp.ht, &smp.s, None)?;
                worst_shift = worst_shift.max((v - base).abs());
            }
            let grid = grid_min(|m| overall_mae_at(&pred, &smp.ht, &smp.s, m), mu0 - 5.0, mu0 + 5.0);
            worst_grid = worst_grid.max((grid - base).abs());
        }
        Ok((
            worst_shift < 1e-9 && worst_grid < 1e-8,
            format!(
                "shift deviation {worst_shift:.2e} eV (tol 1e-9), grid-scan gap {worst_grid:.2e} eV (tol 1e-8)"
            ),
        ))
    })
}

pub fn gauge_spectral_identity() -> CheckResult {
    timed(5, "gauge/spectral identity", || {
        let smp = &suite_samples(1, 51)?[0];
        let path = KPath::through(&[[0.0, 0.0, 0.0], [0.5, 0.25, 0.0]], 20)?;
        let base = bands(&smp.ht, &smp.s, &smp.structure, &path)?;
        let mut worst = 0.0f64;
        for mu in [0.37, -2.5] {
            let shifted = bands(&smp.ht.scaled_add(&smp.s, mu)?, &smp.s, &smp.structure, &path)?;
            for (a, b) in base.energies.iter().zip(&shifted.energies) {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((y - x - mu).abs());
                }
            }
        }
        Ok((worst < 1e-10, format!("20-point path, max deviation {worst:.2e} eV (tol 1e-10)")))
    })
}

fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    let a = CMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    a.qr().q()
}

fn random_herm(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    let a = CMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Eigenvalue and subspace-angle bounds over random pencils with κ(S) swept
/// log-uniformly over [1, 1e4]. δ separates the ground-truth Q levels from the
/// perturbed P levels.
pub fn error_bound(scale: &Scale) -> CheckResult {
    timed(6, "condition-number error bound", || {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (mut violations, mut max_kappa, mut min_slack) = (0usize, 1.0f64, f64::INFINITY);
        for inst in 0..scale.bound_instances {
            let n = rng.gen_range(3..8);
            let kappa = 10f64.powf(4.0 * inst as f64 / (scale.bound_instances.max(2) - 1) as f64);
            let u = random_unitary(&mut rng, n);
            let lam: Vec<f64> = (0..n)
                .map(|i| if i == 0 { 1.0 } else if i == n - 1 { kappa } else { kappa.powf(rng.gen()) })
                .collect();
            let s = &u * CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, lam.iter().map(|&l| Complex64::new(l, 0.0)))) * u.adjoint();
            let s = (&s + s.adjoint()) * Complex64::new(0.5, 0.0);
            let h = random_herm(&mut rng, n) * Complex64::new(4.0, 0.0);
            let gt = DenseKMatrix {
                k: Vector3::zeros(),
                h: h.clone(),
                s: s.clone(),
            };
            let sol = solve_gep(&gt)?;
            let n_p = rng.gen_range(1..n);
            let mut amp = 10f64.powf(rng.gen_range(-4.0..-1.0)) * lam[0];
            let dh = random_herm(&mut rng, n);
            loop {
                let pred = DenseKMatrix {
                    k: Vector3::zeros(),
                    h: &h + &dh * Complex64::new(amp, 0.0),
                    s: s.clone(),
                };
                let ps = solve_gep(&pred)?;
                let delta = sol.eigenvalues[n_p] - ps.eigenvalues[n_p - 1];
                if delta > 1e-6 {
                    let rep = check_error_bound(&gt, &pred, delta, n_p)?;
                    if !rep.holds() {
                        violations += 1;
                    }
                    min_slack = min_slack.min(rep.eig_slack().min(rep.sin_slack()));
                    max_kappa = max_kappa.max(rep.cond.kappa);
                    break;
                }
                amp *= 0.5;
            }
        }
        Ok((
            violations == 0,
            format!(
                "{} instances, kappa up to {max_kappa:.1e}, {violations} violations, min slack {min_slack:.2e}",
                scale.bound_instances
            ),
        ))
    })
}

pub fn pq_identity(scale: &Scale) -> CheckResult {
    timed(7, "PQ diagonalization identity", || {
        let samples = suite_samples(scale.pq_samples, 71)?;
        let mut worst = 0.0f64;
        for smp in &samples {
            for k in kmesh([2, 2, 2])? {
                let m = DenseKMatrix::assemble(&smp.ht, &smp.s, &k)?;
                let split = split_pq(&solve_gep(&m)?, smp.fermi_level, 1.0);
                let b = project_blocks(&m, &split)?;
                if b.pq.len() > 0 {
                    worst = worst.max(max_abs(&b.pq));
                }
            }
        }
        Ok((worst < 1e-8, format!("{} samples x 8 k, max |PQ| {worst:.2e} (tol 1e-8)", samples.len())))
    })
}

pub fn one_band() -> CheckResult {
    timed(8, "one-band chain oracle", || {
        let (eps, t) = (-0.3, -1.1);
        let chain = one_band_chain(eps, t, 2.5)?;
        let path = KPath::through(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]], 21)?;
        let b = bands(&chain.ht, &chain.s, &chain.structure, &path)?;
        let mut worst = 0.0f64;
        for (smp, e) in b.samples.iter().zip(&b.energies) {
            let want = eps + 2.0 * t * (2.0 * std::f64::consts::PI * smp.k.x).cos();
            for v in e {
                worst = worst.max((v - want).abs());
            }
        }
        Ok((worst < 1e-10, format!("{} k-points, max deviation {worst:.2e} eV (tol 1e-10)", b.samples.len())))
    })
}

/// Bands of `gt` along `path` with an optional per-k additive perturbation.
pub fn perturbed_bands(
    smp: &TrainSample,
    path: &KPath,
    mut delta: impl FnMut(usize, &DenseKMatrix) -> Option<CMatrix>,
) -> Result<BandSet> {
    let samples = sample_kpath(&smp.structure, path)?;
    let mut energies = Vec::new();
    let mut kappa = Vec::new();
    for (i, ks) in samples.iter().enumerate() {
        let mut m = DenseKMatrix::assemble(&smp.ht, &smp.s, &ks.k)?;
        if let Some(d) = delta(i, &m) {
            m.h += d;
        }
        let ev = hermitian_eigen(&m.s).0;
        kappa.push(ev[ev.len() - 1] / ev[0]);
        energies.push(solve_gep(&m)?.eigenvalues);
    }
    Ok(BandSet {
        samples,
        energies,
        kappa,
        pq_residual: None,
    })
}

/// A rank-one perturbation along one Q eigenvector at a single k pulls that
/// level below the whole band manifold; the scan must flag exactly that k.
pub fn ghost_detection() -> CheckResult {
    timed(10, "ghost-state detection", || {
        let smp = &suite_samples(1, 81)?[0];
        let window = 1.0;
        let path = KPath::through(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0]], 15)?;
        let gt = bands(&smp.ht, &smp.s, &smp.structure, &path)?;
        let target = gt.samples.len() / 3;
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let pred = perturbed_bands(smp, &path, |i, m| {
            let n = m.h.nrows();
            let noise = random_herm(&mut rng, n) * Complex64::new(1e-3, 0.0);
            let sol = solve_gep(m).expect("positive overlap");
            let split = split_pq(&sol, smp.fermi_level, window);
            if i != target || split.n_q == 0 {
                return Some(noise);
            }
            let v = m.s.clone() * split.u.column(split.n_p);
            let pull = split.eigenvalues[split.n_p] - split.eigenvalues[0] + 1.0;
            Some(noise - &v * v.adjoint() * Complex64::new(pull, 0.0))
        })?;
        let flagged = ghost_scan(&gt, &pred, smp.fermi_level, window, 20.0)?;
        Ok((
            flagged == vec![target],
            format!("injected at k #{target}, flagged {flagged:?}"),
        ))
    })
}
