//! Generalized eigenproblems `H C = S C ε`, band structures, condition
//! diagnostics, P/Q subspace projection and ghost-state scanning.

use std::io::Write;

use nalgebra::{linalg::SymmetricEigen, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hamiltonian::{BlockSparseHamiltonian, CMatrix, DenseKMatrix};
use crate::lattice::{sample_kpath, CrystalStructure, KPath, KSample};

/// Eigenvalues closer than this to the last P eigenvalue join P.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Deviations below this (eV) never count as ghosts.
pub const GHOST_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EigenSolution {
    pub k: Vector3<f64>,
    /// Ascending, eV.
    pub eigenvalues: Vec<f64>,
    /// S-orthonormal columns.
    pub vectors: CMatrix,
}

/// Lower-triangular `L` with `S = L L†`. Fails with the smallest pivot when `S`
/// is not positive definite.
pub fn cholesky(s: &CMatrix) -> Result<CMatrix> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Structural("overlap is not square".into()));
    }
    let mut l = CMatrix::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    let mut failed = false;
    for j in 0..n {
        let mut d = s[(j, j)].re;
        for p in 0..j {
            d -= l[(j, p)].norm_sqr();
        }
        min_pivot = min_pivot.min(d);
        if d <= 0.0 || !d.is_finite() {
            failed = true;
            continue;
        }
        let dj = d.sqrt();
        l[(j, j)] = Complex64::new(dj, 0.0);
        for i in j + 1..n {
            let mut v = s[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)].conj();
            }
            l[(i, j)] = v / dj;
        }
    }
    if failed {
        return Err(Error::Numerical(format!(
            "overlap not positive definite (smallest pivot {min_pivot:e})"
        )));
    }
    Ok(l)
}

fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Ascending eigenpairs of a Hermitian matrix.
pub fn hermitian_eigen(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(hermitian_part(a));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Scale every column so its largest-magnitude entry is real and positive.
pub fn fix_phases(c: &mut CMatrix) {
    for mut col in c.column_iter_mut() {
        let mut best = Complex64::new(0.0, 0.0);
        for z in col.iter() {
            if z.norm() > best.norm() + 1e-12 {
                best = *z;
            }
        }
        if best.norm() > 0.0 {
            let ph = best.conj() / best.norm();
            for z in col.iter_mut() {
                *z *= ph;
            }
        }
    }
}

fn reduce(m: &DenseKMatrix) -> Result<(CMatrix, CMatrix)> {
    if m.h.shape() != m.s.shape() {
        return Err(Error::Structural("H and S shapes differ".into()));
    }
    let l = cholesky(&m.s)?;
    let x = l
        .solve_lower_triangular(&m.h)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let a = l
        .solve_lower_triangular(&x.adjoint())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok((l, a))
}

pub fn solve_gep(m: &DenseKMatrix) -> Result<EigenSolution> {
    let (l, a) = reduce(m)?;
    let (vals, v) = hermitian_eigen(&a);
    let mut c = l
        .adjoint()
        .solve_upper_triangular(&v)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    fix_phases(&mut c);
    Ok(EigenSolution {
        k: m.k,
        eigenvalues: vals,
        vectors: c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionDiag {
    pub kappa: f64,
    pub s_norm: f64,
    /// `κ(S) / ‖S‖₂ = 1 / λ_min(S)`.
    pub bound_factor: f64,
}

pub fn condition_diag(m: &DenseKMatrix) -> Result<ConditionDiag> {
    cholesky(&m.s)?;
    let (vals, _) = hermitian_eigen(&m.s);
    let (lo, hi) = (vals[0], *vals.last().expect("non-empty"));
    Ok(ConditionDiag {
        kappa: hi / lo,
        s_norm: hi,
        bound_factor: (hi / lo) / hi,
    })
}

/// Entrywise sum of moduli.
pub fn norm_11(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm()).sum()
}

/// Outcome of checking the eigenvalue and eigenspace perturbation bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub n_p: usize,
    pub max_eig_diff: f64,
    pub eig_bound: f64,
    pub sin_theta: f64,
    pub sin_bound: f64,
    pub cond: ConditionDiag,
}

impl BoundReport {
    pub fn eig_slack(&self) -> f64 {
        self.eig_bound - self.max_eig_diff
    }

    pub fn sin_slack(&self) -> f64 {
        self.sin_bound - self.sin_theta
    }

    pub fn holds(&self) -> bool {
        self.eig_slack() >= -1e-12 && self.sin_slack() >= -1e-12
    }
}

/// `sin θ` between the spans of the lowest `n_p` S-orthonormal eigenvectors of
/// two pencils that share `S`.
pub fn subspace_sin(a: &EigenSolution, b: &EigenSolution, s: &CMatrix, n_p: usize) -> f64 {
    let n = a.vectors.ncols();
    if n_p == 0 || n_p == n {
        return 0.0;
    }
    let p_b = b.vectors.columns(0, n_p);
    let q_a = a.vectors.columns(n_p, n - n_p);
    let m = q_a.adjoint() * s * p_b;
    m.singular_values().max()
}

/// Check both perturbation bounds for the lowest-`n_p` subspace with the caller's gap `delta`.
pub fn check_error_bound(
    gt: &DenseKMatrix,
    pred: &DenseKMatrix,
    delta: f64,
    n_p: usize,
) -> Result<BoundReport> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("spectral gap must be positive, got {delta}")));
    }
    if (&gt.s - &pred.s).amax_norm() > 0.0 {
        return Err(Error::Structural("bound check needs a shared overlap".into()));
    }
    if n_p > gt.dim() {
        return Err(Error::Structural(format!(
            "subspace of {n_p} bands exceeds dimension {}",
            gt.dim()
        )));
    }
    let a = solve_gep(gt)?;
    let b = solve_gep(pred)?;
    let cond = condition_diag(gt)?;
    let dh = norm_11(&(&gt.h - &pred.h));
    let max_eig_diff = a
        .eigenvalues
        .iter()
        .zip(&b.eigenvalues)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(BoundReport {
        n_p,
        max_eig_diff,
        eig_bound: cond.bound_factor * dh,
        sin_theta: subspace_sin(&a, &b, &gt.s, n_p),
        sin_bound: cond.bound_factor * dh / delta,
        cond,
    })
}

trait AmaxNorm {
    fn amax_norm(&self) -> f64;
}

impl AmaxNorm for CMatrix {
    fn amax_norm(&self) -> f64 {
        self.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct SubspaceSplit {
    pub e_cut: f64,
    pub n_p: usize,
    pub n_q: usize,
    /// `[P Q]`, S-orthonormal.
    pub u: CMatrix,
    pub eigenvalues: Vec<f64>,
}

impl SubspaceSplit {
    /// Gap across the cut, or infinity when either side is empty.
    pub fn gap(&self) -> f64 {
        if self.n_p == 0 || self.n_q == 0 {
            f64::INFINITY
        } else {
            self.eigenvalues[self.n_p] - self.eigenvalues[self.n_p - 1]
        }
    }
}

/// P = eigenvectors with `ε ≤ fermi + window`, extended over any multiplet
/// that touches the threshold.
pub fn split_pq(sol: &EigenSolution, fermi: f64, window: f64) -> SubspaceSplit {
    let e_cut = fermi + window;
    let ev = &sol.eigenvalues;
    let mut n_p = ev.iter().take_while(|&&e| e <= e_cut).count();
    if n_p > 0 {
        while n_p < ev.len() && ev[n_p] - ev[n_p - 1] < DEGENERACY_TOL {
            n_p += 1;
        }
    }
    SubspaceSplit {
        e_cut,
        n_p,
        n_q: ev.len() - n_p,
        u: sol.vectors.clone(),
        eigenvalues: ev.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct ProjectedBlocks {
    pub pp: CMatrix,
    pub pq: CMatrix,
    pub qp: CMatrix,
    pub qq: CMatrix,
}

/// `U† H U` partitioned by the split.
pub fn project_blocks(target: &DenseKMatrix, split: &SubspaceSplit) -> Result<ProjectedBlocks> {
    if target.h.nrows() != split.u.nrows() {
        return Err(Error::Structural(format!(
            "target has dimension {}, eigenbasis {}",
            target.h.nrows(),
            split.u.nrows()
        )));
    }
    let full = split.u.adjoint() * &target.h * &split.u;
    let (p, q) = (split.n_p, split.n_q);
    Ok(ProjectedBlocks {
        pp: full.view((0, 0), (p, p)).into_owned(),
        pq: full.view((0, p), (p, q)).into_owned(),
        qp: full.view((p, 0), (q, p)).into_owned(),
        qq: full.view((p, p), (q, q)).into_owned(),
    })
}

pub fn max_abs(a: &CMatrix) -> f64 {
    a.amax_norm()
}

#[derive(Clone, Debug)]
pub struct BandSet {
    pub samples: Vec<KSample>,
    /// `energies[k][n]`, ascending per k.
    pub energies: Vec<Vec<f64>>,
    pub kappa: Vec<f64>,
    /// ‖H̃_PQ‖∞ of a candidate projected onto this set's eigenbasis, when computed.
    pub pq_residual: Option<Vec<f64>>,
}

fn solve_at(
    h: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    k: &Vector3<f64>,
) -> Result<(DenseKMatrix, EigenSolution)> {
    let at = |e: Error| Error::Numerical(format!("at k = ({:.6}, {:.6}, {:.6}): {e}", k.x, k.y, k.z));
    let m = DenseKMatrix::assemble(h, s, k).map_err(at)?;
    let sol = solve_gep(&m).map_err(at)?;
    Ok((m, sol))
}

pub fn bands(
    h: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    structure: &CrystalStructure,
    path: &KPath,
) -> Result<BandSet> {
    let samples = sample_kpath(structure, path)?;
    let mut energies = Vec::with_capacity(samples.len());
    let mut kappa = Vec::with_capacity(samples.len());
    for smp in &samples {
        let (m, sol) = solve_at(h, s, &smp.k)?;
        kappa.push(condition_diag(&m)?.kappa);
        energies.push(sol.eigenvalues);
    }
    Ok(BandSet {
        samples,
        energies,
        kappa,
        pq_residual: None,
    })
}

/// Ground-truth bands along the path plus the PQ residual of `candidate` in the
/// ground-truth eigenbasis at each k.
pub fn bands_with_pq(
    gt: &BlockSparseHamiltonian,
    candidate: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    structure: &CrystalStructure,
    path: &KPath,
    fermi: f64,
    window: f64,
) -> Result<BandSet> {
    let mut set = bands(gt, s, structure, path)?;
    let mut pq = Vec::with_capacity(set.samples.len());
    for smp in &set.samples {
        let (_, sol) = solve_at(gt, s, &smp.k)?;
        let split = split_pq(&sol, fermi, window);
        let cand = DenseKMatrix::assemble(candidate, s, &smp.k)?;
        pq.push(max_abs(&project_blocks(&cand, &split)?.pq));
    }
    set.pq_residual = Some(pq);
    Ok(set)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices of path samples whose largest in-window band deviation exceeds
/// `outlier_factor` times the path median, after removing the median signed
/// offset. Bands enter the window when their ground-truth energy is at most
/// `fermi + window`.
pub fn ghost_scan(
    gt: &BandSet,
    pred: &BandSet,
    fermi: f64,
    window: f64,
    outlier_factor: f64,
) -> Result<Vec<usize>> {
    if gt.samples.len() != pred.samples.len()
        || gt
            .samples
            .iter()
            .zip(&pred.samples)
            .any(|(a, b)| (a.k - b.k).amax() > 1e-12)
        || gt.energies.iter().zip(&pred.energies).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Structural("band sets sample different k-paths".into()));
    }
    let cut = fermi + window;
    let mut signed = Vec::new();
    for (a, b) in gt.energies.iter().zip(&pred.energies) {
        for (x, y) in a.iter().zip(b) {
            if *x <= cut {
                signed.push(y - x);
            }
        }
    }
    let offset = median(&mut signed);
    let per_k: Vec<f64> = gt
        .energies
        .iter()
        .zip(&pred.energies)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .filter(|(x, _)| **x <= cut)
                .map(|(x, y)| (y - x - offset).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let med = median(&mut per_k.clone());
    let threshold = (outlier_factor * med).max(GHOST_FLOOR);
    Ok(per_k
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Band CSV: `arclength,k1,k2,k3,band_index,energy_eV,source`.
pub fn write_band_csv(out: &mut impl Write, sources: &[(&str, &BandSet)]) -> std::io::Result<()> {
    writeln!(out, "arclength,k1,k2,k3,band_index,energy_eV,source")?;
    for (name, set) in sources {
        for (smp, e) in set.samples.iter().zip(&set.energies) {
            for (n, en) in e.iter().enumerate() {
                writeln!(
                    out,
                    "{:.8},{:.8},{:.8},{:.8},{},{:.10},{}",
                    smp.arclength, smp.k.x, smp.k.y, smp.k.z, n, en, name
                )?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random_herm(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
        let a = CMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        hermitian_part(&a)
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
        let a = CMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        &a * a.adjoint() + CMatrix::identity(n, n) * c(0.3)
    }

    fn dense(h: CMatrix, s: CMatrix) -> DenseKMatrix {
        DenseKMatrix {
            k: Vector3::zeros(),
            h,
            s,
        }
    }

    fn det(m: &CMatrix) -> Complex64 {
        m.clone().lu().determinant()
    }

    #[test]
    fn trivial_pencils() {
        let h = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0), c(-1.0), c(0.5)]));
        let sol = solve_gep(&dense(h, CMatrix::identity(3, 3))).unwrap();
        assert_eq!(sol.eigenvalues, vec![-1.0, 0.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(&mut rng, 5);
        let sol = solve_gep(&dense(&s * c(0.7), s)).unwrap();
        assert!(sol.eigenvalues.iter().all(|e| (e - 0.7).abs() < 1e-12));
    }

    #[test]
    fn invariants_and_determinant_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (h, s) = (random_herm(&mut rng, 4), random_spd(&mut rng, 4));
            let m = dense(h.clone(), s.clone());
            let sol = solve_gep(&m).unwrap();
            let gram = sol.vectors.adjoint() * &s * &sol.vectors;
            assert!((gram - CMatrix::identity(4, 4)).amax_norm() < 1e-8);
            let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                4,
                sol.eigenvalues.iter().map(|&e| c(e)),
            ));
            let resid = &h * &sol.vectors - &s * &sol.vectors * diag;
            assert!(resid.amax_norm() < 1e-8 * h.norm());

            // independent roots of det(H - εS) by sign-change scan + bisection
            let f = |e: f64| det(&(&h - &s * c(e))).re;
            let mut roots = Vec::new();
            let (lo, hi, steps) = (-20.0, 20.0, 40000);
            let mut prev = f(lo);
            for i in 1..=steps {
                let x = lo + (hi - lo) * i as f64 / steps as f64;
                let fx = f(x);
                if prev.signum() != fx.signum() {
                    let (mut a, mut b) = (x - (hi - lo) / steps as f64, x);
                    for _ in 0..100 {
                        let mid = 0.5 * (a + b);
                        if f(mid).signum() == f(a).signum() {
                            a = mid;
                        } else {
                            b = mid;
                        }
                    }
                    roots.push(0.5 * (a + b));
                }
                prev = fx;
            }
            assert_eq!(roots.len(), 4);
            for (r, e) in roots.iter().zip(&sol.eigenvalues) {
                assert!((r - e).abs() < 1e-9, "{r} vs {e}");
            }
        }
    }

    #[test]
    fn cholesky_reports_pivot() {
        let s = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0), c(-0.25)]));
        let err = cholesky(&s).unwrap_err().to_string();
        assert!(err.contains("not positive definite") && err.contains("-2.5e-1"), "{err}");
    }

    #[test]
    fn condition_numbers() {
        let d = condition_diag(&dense(CMatrix::identity(3, 3), CMatrix::identity(3, 3))).unwrap();
        assert_eq!((d.kappa, d.s_norm, d.bound_factor), (1.0, 1.0, 1.0));
        let s = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0), c(0.5)]));
        let d = condition_diag(&dense(CMatrix::identity(2, 2), s)).unwrap();
        assert!((d.kappa - 4.0).abs() < 1e-14 && (d.s_norm - 2.0).abs() < 1e-14);
        assert!((d.bound_factor - 2.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(&mut rng, 6);
        let d = condition_diag(&dense(CMatrix::identity(6, 6), s.clone())).unwrap();
        let lmin = hermitian_eigen(&s).0[0];
        assert!((d.bound_factor * lmin - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bounds_hold_on_small_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, s) = (random_herm(&mut rng, 3), random_spd(&mut rng, 3));
        let gt = dense(h.clone(), s.clone());
        let same = check_error_bound(&gt, &gt, 1.0, 1).unwrap();
        assert_eq!((same.max_eig_diff, same.eig_bound), (0.0, 0.0));
        let v = CMatrix::from_fn(3, 1, |_, _| Complex64::new(rng.gen(), rng.gen()));
        let pred = dense(&h + &v * v.adjoint() * c(0.05), s);
        let sol = solve_gep(&gt).unwrap();
        let delta = sol.eigenvalues[1] - sol.eigenvalues[0];
        let rep = check_error_bound(&gt, &pred, delta, 1).unwrap();
        assert!(rep.holds(), "{rep:?}");
        assert!(rep.max_eig_diff > 0.0 && rep.sin_theta > 0.0);
        assert!(matches!(check_error_bound(&gt, &pred, 0.0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn split_counts() {
        let sol = EigenSolution {
            k: Vector3::zeros(),
            eigenvalues: vec![-3.0, -1.0, 2.0, 5.0],
            vectors: CMatrix::identity(4, 4),
        };
        assert_eq!(split_pq(&sol, 0.0, f64::INFINITY).n_q, 0);
        assert_eq!(split_pq(&sol, -10.0, 0.0).n_p, 0);
        let sp = split_pq(&sol, 0.0, 1.5);
        assert_eq!((sp.n_p, sp.n_q), (2, 2));
        assert_eq!(sp.gap(), 3.0);
        let deg = EigenSolution {
            eigenvalues: vec![-1.0, 1.0, 1.0 + 1e-12, 4.0],
            ..sol
        };
        assert_eq!(split_pq(&deg, 0.0, 1.0).n_p, 3);
    }

    #[test]
    fn projection_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, s) = (random_herm(&mut rng, 6), random_spd(&mut rng, 6));
        let gt = dense(h.clone(), s.clone());
        let sol = solve_gep(&gt).unwrap();
        let split = split_pq(&sol, sol.eigenvalues[2], 0.0);
        assert_eq!(split.n_p, 3);
        let b = project_blocks(&gt, &split).unwrap();
        assert!(max_abs(&b.pq) < 1e-8);
        for i in 0..3 {
            assert!((b.pp[(i, i)].re - sol.eigenvalues[i]).abs() < 1e-8);
        }
        let shifted = project_blocks(&dense(&h + &s * c(0.4), s.clone()), &split).unwrap();
        assert!(max_abs(&shifted.pq) < 1e-8);
        assert!((shifted.qq[(0, 0)].re - sol.eigenvalues[3] - 0.4).abs() < 1e-8);

        let pert = random_herm(&mut rng, 6);
        let mut last = f64::INFINITY;
        for scale in [1e-1, 1e-2, 1e-3] {
            let b = project_blocks(&dense(&h + &pert * c(scale), s.clone()), &split).unwrap();
            assert!((&b.qp - b.pq.adjoint()).amax_norm() < 1e-10);
            let n = max_abs(&b.pq);
            assert!(n > 0.0 && n < last);
            last = n;
        }
    }

    fn toy_bands(values: Vec<Vec<f64>>) -> BandSet {
        BandSet {
            samples: (0..values.len())
                .map(|i| KSample {
                    k: Vector3::new(i as f64 / 10.0, 0.0, 0.0),
                    arclength: i as f64,
                })
                .collect(),
            kappa: vec![1.0; values.len()],
            energies: values,
            pq_residual: None,
        }
    }

    #[test]
    fn ghost_scan_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = toy_bands((0..10).map(|i| vec![-1.0 + 0.1 * i as f64, 2.0, 3.0]).collect());
        assert!(ghost_scan(&gt, &gt, 0.0, 10.0, 20.0).unwrap().is_empty());
        let shifted = toy_bands(gt.energies.iter().map(|e| e.iter().map(|x| x + 0.3).collect()).collect());
        assert!(ghost_scan(&gt, &shifted, 0.0, 10.0, 20.0).unwrap().is_empty());
        let mut noisy: Vec<Vec<f64>> = gt
            .energies
            .iter()
            .map(|e| e.iter().map(|x| x + 1e-3 * (rng.gen::<f64>() - 0.5)).collect())
            .collect();
        noisy[4][1] += 1.0;
        assert_eq!(ghost_scan(&gt, &toy_bands(noisy), 0.0, 10.0, 20.0).unwrap(), vec![4]);
        let short = toy_bands(gt.energies[..5].to_vec());
        assert!(ghost_scan(&gt, &short, 0.0, 10.0, 20.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let b = toy_bands(vec![vec![1.0, 2.0]]);
        let mut buf = Vec::new();
        write_band_csv(&mut buf, &[("gt", &b)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "arclength,k1,k2,k3,band_index,energy_eV,source");
        assert!(lines[2].ends_with(",1,2.0000000000,gt"));
    }
}
