//! Synthetic two-center tight-binding generator and dataset IO.
//!
//! Blocks are sums of radial profiles times CG-coupled harmonics of the bond
//! direction, so they rotate exactly like real orbital blocks. The hidden
//! correction rescales the real spin-conserving channels by a smooth function
//! of a local density descriptor.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{
    BlockSparseHamiltonian, CMatrix, DenseKMatrix, OrbitalBasis, SpinRegion,
};
use crate::irreps::{clebsch_gordan, real_sph_harm, wigner_d_rotation};
use crate::lattice::{build_neighbor_graph, kmesh, CrystalStructure, EdgeKey, NeighborGraph};
use crate::model::envelope;
use crate::spectra::{cholesky, solve_gep};

pub const MANIFEST_FORMAT: &str = "hamcorr.manifest.v1";
const S_RETRIES: usize = 12;
const PLACEMENT_TRIES: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSpec {
    pub name: String,
    /// `[l, count]` per shell.
    pub shells: Vec<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeFamily {
    Cubic,
    Hexagonal,
    Triclinic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub palette: Vec<ElementSpec>,
    pub families: Vec<LatticeFamily>,
    pub atoms_min: usize,
    pub atoms_max: usize,
    /// Å³
    pub volume_per_atom: f64,
    /// Å
    pub min_distance: f64,
    /// Å
    pub decay_length: f64,
    /// Two-center terms vanish smoothly at this distance (Å).
    pub hopping_cutoff: f64,
    /// Edges stored in every container (Å).
    pub graph_cutoff: f64,
    /// Relative size of the hidden modulation.
    pub correction_amplitude: f64,
    /// The modulation is confined to edges shorter than this (Å).
    pub correction_cutoff: f64,
    /// eV
    pub soc_strength: f64,
    pub occupied_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let el = |name: &str, shells: &[[usize; 2]]| ElementSpec {
            name: name.into(),
            shells: shells.to_vec(),
        };
        GeneratorConfig {
            palette: vec![
                el("A", &[[0, 1]]),
                el("B", &[[0, 1], [1, 1]]),
                el("C", &[[0, 1], [1, 1], [2, 1]]),
                el("D", &[[0, 2], [1, 1], [2, 1]]),
            ],
            families: vec![LatticeFamily::Cubic, LatticeFamily::Hexagonal, LatticeFamily::Triclinic],
            atoms_min: 1,
            atoms_max: 4,
            volume_per_atom: 14.0,
            min_distance: 1.8,
            decay_length: 1.5,
            hopping_cutoff: 8.0,
            graph_cutoff: 8.0,
            correction_amplitude: 0.1,
            correction_cutoff: 6.0,
            soc_strength: 0.05,
            occupied_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.palette.is_empty() {
            return bad("palette is empty".into());
        }
        if self.families.is_empty() {
            return bad("no lattice family enabled".into());
        }
        if self.atoms_min == 0 || self.atoms_min > self.atoms_max {
            return bad(format!("atoms range {}..={} is empty", self.atoms_min, self.atoms_max));
        }
        if !(self.decay_length > 0.0) {
            return bad(format!("decay length {} must be positive", self.decay_length));
        }
        if !(self.correction_amplitude >= 0.0) || !(self.soc_strength >= 0.0) {
            return bad("amplitudes must be non-negative".into());
        }
        if !(self.volume_per_atom > 0.0) || !(self.min_distance > 0.0) {
            return bad("volume per atom and minimum distance must be positive".into());
        }
        if self.min_distance.powi(3) > 0.7 * self.volume_per_atom {
            return bad(format!(
                "minimum distance {} Å cannot be met at {} Å³ per atom",
                self.min_distance, self.volume_per_atom
            ));
        }
        if !(self.correction_cutoff > 0.0
            && self.correction_cutoff <= self.hopping_cutoff
            && self.hopping_cutoff <= self.graph_cutoff)
        {
            return bad("expected 0 < correction_cutoff <= hopping_cutoff <= graph_cutoff".into());
        }
        if !(self.occupied_fraction > 0.0 && self.occupied_fraction < 1.0) {
            return bad(format!("occupied fraction {} outside (0, 1)", self.occupied_fraction));
        }
        self.basis().map(|_| ())
    }

    pub fn basis(&self) -> Result<OrbitalBasis> {
        let mut b = OrbitalBasis::new();
        for e in &self.palette {
            let shells: Vec<(usize, usize)> = e.shells.iter().map(|s| (s[0], s[1])).collect();
            b = b.with(&e.name, &shells)?;
        }
        Ok(b)
    }
}

/// Rng for sample `index`; stream 0 is reserved for the material.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Element-level parameters shared by every sample of a dataset.
#[derive(Clone, Debug)]
pub struct Material {
    pub basis: OrbitalBasis,
    /// Per element, `(l, offset)` of each orbital set.
    sets: BTreeMap<String, Vec<(usize, usize)>>,
    order: BTreeMap<String, usize>,
    onsite: BTreeMap<String, Vec<f64>>,
    /// Coupling between distinct same-degree sets on one atom.
    mixing: BTreeMap<String, f64>,
    soc: BTreeMap<String, f64>,
    /// Keyed by canonical `((elem, set), (elem, set))`; one amplitude per
    /// allowed coupled degree.
    hopping: BTreeMap<((usize, usize), (usize, usize)), Vec<f64>>,
    overlap: BTreeMap<((usize, usize), (usize, usize)), Vec<f64>>,
    /// Center of the environment descriptor.
    pub rho0: f64,
}

fn coupled_degrees(la: usize, lb: usize) -> impl Iterator<Item = usize> {
    (la.abs_diff(lb)..=la + lb).step_by(2)
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.gen_range(lo..hi);
    if rng.gen::<bool>() {
        v
    } else {
        -v
    }
}

impl Material {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let basis = cfg.basis()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sets = BTreeMap::new();
        let mut order = BTreeMap::new();
        let mut onsite = BTreeMap::new();
        let mut mixing = BTreeMap::new();
        let mut soc = BTreeMap::new();
        for (n, e) in cfg.palette.iter().enumerate() {
            let s = basis.orbital_sets(&e.name)?;
            let eps: Vec<f64> = s
                .iter()
                .map(|&(l, _)| match l {
                    0 => rng.gen_range(-6.0..-3.0),
                    1 => rng.gen_range(-3.0..0.0),
                    _ => rng.gen_range(-1.0..2.0),
                })
                .collect();
            onsite.insert(e.name.clone(), eps);
            mixing.insert(e.name.clone(), signed(&mut rng, 0.1, 0.4));
            soc.insert(e.name.clone(), cfg.soc_strength * rng.gen_range(0.5..1.5));
            sets.insert(e.name.clone(), s);
            order.insert(e.name.clone(), n);
        }
        let mut hopping = BTreeMap::new();
        let mut overlap = BTreeMap::new();
        let ids: Vec<(usize, usize, usize)> = cfg
            .palette
            .iter()
            .enumerate()
            .flat_map(|(n, e)| {
                sets[&e.name]
                    .iter()
                    .enumerate()
                    .map(move |(a, &(l, _))| (n, a, l))
                    .collect::<Vec<_>>()
            })
            .collect();
        for (p, &(ea, sa, la)) in ids.iter().enumerate() {
            for &(eb, sb, lb) in &ids[p..] {
                let h: Vec<f64> = coupled_degrees(la, lb).map(|_| signed(&mut rng, 2.0, 6.0)).collect();
                let s: Vec<f64> = coupled_degrees(la, lb).map(|_| signed(&mut rng, 0.05, 0.25)).collect();
                hopping.insert(((ea, sa), (eb, sb)), h);
                overlap.insert(((ea, sa), (eb, sb)), s);
            }
        }
        Ok(Material {
            basis,
            sets,
            order,
            onsite,
            mixing,
            soc,
            hopping,
            overlap,
            rho0: 60.0 / cfg.volume_per_atom,
        })
    }
}

/// Σ_L c_L f_L C(la,lb,L) · Y_L(dir) with `Y_0 = 1`.
fn angular_block(la: usize, lb: usize, coeffs: &[f64], dir: &Vector3<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(2 * la + 1, 2 * lb + 1);
    for (&c, l) in coeffs.iter().zip(coupled_degrees(la, lb)) {
        if c == 0.0 {
            continue;
        }
        let y = real_sph_harm(l, dir)?;
        let norm = (4.0 * PI).sqrt();
        let cg = clebsch_gordan(la, lb, l)?;
        for &(ma, mb, m, v) in cg.nonzeros() {
            out[(ma, mb)] += c * norm * v * y[m];
        }
    }
    Ok(out)
}

/// Angular momentum matrices `(Lx, Ly, Lz)` in the real harmonic basis.
pub fn angular_momentum(l: usize) -> Result<[CMatrix; 3]> {
    let n = 2 * l + 1;
    let h = 1e-4;
    let rz = |t: f64| Matrix3::new(t.cos(), -t.sin(), 0.0, t.sin(), t.cos(), 0.0, 0.0, 0.0, 1.0);
    // generator entries about z are integers
    let az = ((wigner_d_rotation(l, &rz(h))? - wigner_d_rotation(l, &rz(-h))?) / (2.0 * h))
        .map(|v| v.round());
    let to_x = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
    let to_y = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
    let dx = wigner_d_rotation(l, &to_x)?;
    let dy = wigner_d_rotation(l, &to_y)?;
    let ax = &dx * &az * dx.transpose();
    let ay = &dy * &az * dy.transpose();
    let i = |a: &DMatrix<f64>| CMatrix::from_fn(n, n, |r, c| Complex64::new(0.0, a[(r, c)]));
    Ok([i(&ax), i(&ay), i(&az)])
}

/// On-site `λ L·S` as the four spin blocks of one atom.
fn soc_blocks(material: &Material, element: &str) -> Result<[CMatrix; 4]> {
    let n = material.basis.dim(element)?;
    let lam = material.soc[element];
    let mut out = [CMatrix::zeros(n, n), CMatrix::zeros(n, n), CMatrix::zeros(n, n), CMatrix::zeros(n, n)];
    let half = Complex64::new(lam / 2.0, 0.0);
    let im = Complex64::new(0.0, 1.0);
    for &(l, off) in &material.sets[element] {
        if l == 0 || lam == 0.0 {
            continue;
        }
        let [lx, ly, lz] = angular_momentum(l)?;
        let w = 2 * l + 1;
        let blocks = [
            &lz * half,
            (&lx - &ly * im) * half,
            (&lx + &ly * im) * half,
            &lz * (-half),
        ];
        for (o, b) in out.iter_mut().zip(blocks) {
            o.view_mut((off, off), (w, w)).copy_from(&b);
        }
    }
    Ok(out)
}

/// Local density descriptor per atom.
pub fn environment(graph: &NeighborGraph, n_atoms: usize) -> Vec<f64> {
    let mut rho = vec![0.0; n_atoms];
    for e in &graph.edges {
        if !e.key().is_onsite() && e.distance < 6.0 {
            rho[e.i] += (-(e.distance / 2.5).powi(2)).exp();
        }
    }
    rho
}

/// `(H0, HT, S)` of one structure; deterministic in its inputs.
pub fn build_hamiltonians(
    cfg: &GeneratorConfig,
    material: &Material,
    structure: &CrystalStructure,
) -> Result<(BlockSparseHamiltonian, BlockSparseHamiltonian, BlockSparseHamiltonian)> {
    structure.validate()?;
    let graph = build_neighbor_graph(structure, cfg.graph_cutoff)?;
    let species = structure.species.clone();
    let mut h0 = BlockSparseHamiltonian::zeros_on_graph(material.basis.clone(), species.clone(), &graph, true)?;
    let mut ht = h0.clone();
    let mut s_on = BlockSparseHamiltonian::zeros_on_graph(material.basis.clone(), species.clone(), &graph, false)?;
    let mut s_off = s_on.clone();
    let rho = environment(&graph, structure.num_atoms());
    let amp = cfg.correction_amplitude;
    let c = |x: f64| Complex64::new(x, 0.0);

    for e in &graph.edges {
        let key = e.key();
        let (ei, ej) = (&species[e.i], &species[e.j]);
        let (ni, nj) = (material.basis.dim(ei)?, material.basis.dim(ej)?);
        let mut r0 = DMatrix::<f64>::zeros(ni, nj);
        let mut rt = DMatrix::<f64>::zeros(ni, nj);
        let mut so = DMatrix::<f64>::zeros(ni, nj);
        if key.is_onsite() {
            let sets = &material.sets[ei];
            let eps = &material.onsite[ei];
            let shift = amp * (0.5 * (rho[e.i] - material.rho0)).tanh();
            for (a, &(la, oa)) in sets.iter().enumerate() {
                for m in 0..2 * la + 1 {
                    r0[(oa + m, oa + m)] = eps[a];
                    rt[(oa + m, oa + m)] = eps[a] * (1.0 + shift);
                    so[(oa + m, oa + m)] = 1.0;
                }
                for &(lb, ob) in &sets[a + 1..] {
                    if lb == la {
                        let t = material.mixing[ei];
                        for m in 0..2 * la + 1 {
                            for (x, y) in [(oa + m, ob + m), (ob + m, oa + m)] {
                                r0[(x, y)] = t;
                                rt[(x, y)] = t * (1.0 + shift);
                            }
                        }
                    }
                }
            }
            let soc = soc_blocks(material, ei)?;
            for (r, b) in soc.into_iter().enumerate() {
                *h0.block_mut(&key, SpinRegion::ALL[r]).expect("on graph") += &b;
                *ht.block_mut(&key, SpinRegion::ALL[r]).expect("on graph") += b;
            }
            s_on.block_mut(&key, SpinRegion::UpUp).expect("on graph").copy_from(&so.map(c));
        } else if e.distance < cfg.hopping_cutoff {
            let radial = (-e.distance / cfg.decay_length).exp() * envelope(e.distance, cfg.hopping_cutoff);
            let modulated = e.distance < cfg.correction_cutoff && amp > 0.0;
            let rho_bar = 0.5 * (rho[e.i] + rho[e.j]);
            let env = envelope(e.distance, cfg.correction_cutoff);
            let (oi, oj) = (material.order[ei], material.order[ej]);
            let dir = e.displacement / e.distance;
            for (a, &(la, oa)) in material.sets[ei].iter().enumerate() {
                for (b, &(lb, ob)) in material.sets[ej].iter().enumerate() {
                    let (p, q) = ((oi, a), (oj, b));
                    let (id, flip) = if p <= q { ((p, q), false) } else { ((q, p), true) };
                    let (l1, l2, d) = if flip { (lb, la, -dir) } else { (la, lb, dir) };
                    let hc: Vec<f64> = material.hopping[&id].iter().map(|v| v * radial).collect();
                    let sc: Vec<f64> = material.overlap[&id].iter().map(|v| v * radial).collect();
                    let orient = |m: DMatrix<f64>| if flip { m.transpose() } else { m };
                    let b0 = orient(angular_block(l1, l2, &hc, &d)?);
                    let bs = orient(angular_block(l1, l2, &sc, &d)?);
                    let bt = if modulated {
                        let tc: Vec<f64> = hc
                            .iter()
                            .zip(coupled_degrees(l1, l2))
                            .map(|(v, l)| {
                                v * (1.0 + amp * (0.5 * (rho_bar - material.rho0) + 0.3 * l as f64).tanh() * env)
                            })
                            .collect();
                        orient(angular_block(l1, l2, &tc, &d)?)
                    } else {
                        b0.clone()
                    };
                    let (wa, wb) = (2 * la + 1, 2 * lb + 1);
                    r0.view_mut((oa, ob), (wa, wb)).copy_from(&b0);
                    rt.view_mut((oa, ob), (wa, wb)).copy_from(&bt);
                    so.view_mut((oa, ob), (wa, wb)).copy_from(&bs);
                }
            }
            s_off.block_mut(&key, SpinRegion::UpUp).expect("on graph").copy_from(&so.map(c));
        }
        for region in [SpinRegion::UpUp, SpinRegion::DownDown] {
            *h0.block_mut(&key, region).expect("on graph") += r0.map(c);
            *ht.block_mut(&key, region).expect("on graph") += rt.map(c);
        }
    }

    let s = positive_overlap(&s_on, &s_off)?;
    let (h0, _) = h0.symmetrize()?;
    let (ht, _) = ht.symmetrize()?;
    Ok((h0, ht, s))
}

/// `S_on + α S_off`, shrinking α until `S(k)` is positive definite on a 4×4×4 mesh.
fn positive_overlap(on: &BlockSparseHamiltonian, off: &BlockSparseHamiltonian) -> Result<BlockSparseHamiltonian> {
    let mesh = kmesh([4, 4, 4])?;
    let mut alpha = 1.0;
    for _ in 0..S_RETRIES {
        let (s, _) = on.scaled_add(off, alpha)?.symmetrize()?;
        if mesh.iter().all(|k| cholesky(&s.bloch_matrix(k)).is_ok()) {
            return Ok(s);
        }
        alpha *= 0.7;
    }
    Err(Error::Numerical(format!(
        "overlap not positive definite after {S_RETRIES} rescalings"
    )))
}

fn random_lattice(cfg: &GeneratorConfig, n_atoms: usize, rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let family = cfg.families[rng.gen_range(0..cfg.families.len())];
    let vol = cfg.volume_per_atom * n_atoms as f64;
    let m = match family {
        LatticeFamily::Cubic => Matrix3::identity(),
        LatticeFamily::Hexagonal => {
            let ratio = rng.gen_range(1.4..1.8);
            Matrix3::new(1.0, 0.0, 0.0, -0.5, 3f64.sqrt() / 2.0, 0.0, 0.0, 0.0, ratio)
        }
        LatticeFamily::Triclinic => {
            let deg = |rng: &mut ChaCha8Rng| rng.gen_range(80.0f64..100.0).to_radians();
            let (al, be, ga) = (deg(rng), deg(rng), deg(rng));
            let (b, c) = (rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15));
            let cx = be.cos();
            let cy = (al.cos() - be.cos() * ga.cos()) / ga.sin();
            let cz = (1.0 - cx * cx - cy * cy).max(1e-3).sqrt();
            Matrix3::new(
                1.0, 0.0, 0.0,
                b * ga.cos(), b * ga.sin(), 0.0,
                c * cx, c * cy, c * cz,
            )
        }
    };
    // small symmetric strain
    let mut strain = Matrix3::identity();
    for a in 0..3 {
        for b in a..3 {
            let v = rng.gen_range(-0.02..0.02);
            strain[(a, b)] += v;
            if a != b {
                strain[(b, a)] += v;
            }
        }
    }
    let m = m * strain;
    m * (vol / m.determinant().abs()).cbrt()
}

fn min_image_distance(lattice: &Matrix3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let lt = lattice.transpose();
    let mut best = f64::INFINITY;
    for x in -2..=2 {
        for y in -2..=2 {
            for z in -2..=2 {
                let d = (lt * (b - a + Vector3::new(x as f64, y as f64, z as f64))).norm();
                if d > 1e-12 {
                    best = best.min(d);
                }
            }
        }
    }
    best
}

/// A random periodic structure honoring the minimum distance.
pub fn random_structure(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<CrystalStructure> {
    for _ in 0..PLACEMENT_TRIES {
        let n = rng.gen_range(cfg.atoms_min..=cfg.atoms_max);
        let lattice = random_lattice(cfg, n, rng);
        let zero = Vector3::zeros();
        if min_image_distance(&lattice, &zero, &zero) < cfg.min_distance {
            continue;
        }
        let mut frac: Vec<Vector3<f64>> = Vec::with_capacity(n);
        let mut tries = 0;
        while frac.len() < n && tries < PLACEMENT_TRIES {
            tries += 1;
            let f = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            if frac.iter().all(|g| min_image_distance(&lattice, g, &f) >= cfg.min_distance) {
                frac.push(f);
            }
        }
        if frac.len() < n {
            continue;
        }
        let species = (0..n)
            .map(|_| cfg.palette[rng.gen_range(0..cfg.palette.len())].name.clone())
            .collect();
        return CrystalStructure::new(lattice, species, frac);
    }
    Err(Error::Numerical(format!(
        "no structure honoring the {} Å minimum distance after {PLACEMENT_TRIES} attempts",
        cfg.min_distance
    )))
}

/// Midpoint between the highest occupied and lowest empty level at Γ.
pub fn fermi_level(h: &BlockSparseHamiltonian, s: &BlockSparseHamiltonian, occupied_fraction: f64) -> Result<f64> {
    let sol = solve_gep(&DenseKMatrix::assemble(h, s, &Vector3::zeros())?)?;
    let n = sol.eigenvalues.len();
    if n < 2 {
        return Ok(sol.eigenvalues[0] + 1.0);
    }
    let occ = ((occupied_fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok(0.5 * (sol.eigenvalues[occ - 1] + sol.eigenvalues[occ]))
}

/// One `(structure, H0, HT, S)` tuple.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub name: String,
    pub structure: CrystalStructure,
    pub h0: BlockSparseHamiltonian,
    pub ht: BlockSparseHamiltonian,
    /// Spinless overlap.
    pub s: BlockSparseHamiltonian,
    pub fermi_level: f64,
}

impl TrainSample {
    pub fn save(&self, dir: &Path) -> Result<SamplePaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SamplePaths {
            structure: dir.join("structure.json"),
            h0: dir.join("h0.json"),
            ht: dir.join("ht.json"),
            s: dir.join("s.json"),
        };
        self.structure.save(&paths.structure)?;
        self.h0.save(&paths.h0, false)?;
        self.ht.save(&paths.ht, false)?;
        self.s.save(&paths.s, true)?;
        Ok(paths)
    }
}

pub fn gen_sample(cfg: &GeneratorConfig, material: &Material, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let structure = random_structure(cfg, rng)?;
    let (h0, ht, s) = build_hamiltonians(cfg, material, &structure)?;
    let fermi = fermi_level(&ht, &s, cfg.occupied_fraction)?;
    Ok(TrainSample {
        name: String::new(),
        structure,
        h0,
        ht,
        s,
        fermi_level: fermi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePaths {
    pub structure: PathBuf,
    pub h0: PathBuf,
    pub ht: PathBuf,
    pub s: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub name: String,
    pub split: Split,
    pub structure: String,
    pub h0: String,
    pub ht: String,
    pub s: String,
    #[serde(rename = "fermi_level_eV")]
    pub fermi_level_ev: f64,
}

impl SampleRecord {
    pub fn paths(&self, root: &Path) -> SamplePaths {
        SamplePaths {
            structure: root.join(&self.structure),
            h0: root.join(&self.h0),
            ht: root.join(&self.ht),
            s: root.join(&self.s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub generator: GeneratorConfig,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }

    /// Names unique, files present.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::parse("/format", format!("expected {MANIFEST_FORMAT:?}")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.samples {
            if !seen.insert(&r.name) {
                return Err(Error::Validation(format!("sample {:?} listed twice", r.name)));
            }
            let p = r.paths(root);
            for f in [&p.structure, &p.h0, &p.ht, &p.s] {
                if !f.is_file() {
                    return Err(Error::io(
                        f,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse("", e.to_string()))?;
        m.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Orbital basis of the generating material.
    pub fn generator_basis(&self) -> Result<OrbitalBasis> {
        Ok(Material::generate(&self.generator)?.basis)
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<TrainSample>> {
        self.split(split)
            .map(|r| {
                let mut s = load_sample(&r.paths(root), r.fermi_level_ev)?;
                s.name = r.name.clone();
                Ok(s)
            })
            .collect()
    }
}

/// Generate and write a dataset; sample `n` (counting across splits) draws from stream `n + 1`.
pub fn gen_dataset(
    cfg: &GeneratorConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Configuration("every split needs at least one sample".into()));
    }
    let material = Material::generate(cfg)?;
    let jobs: Vec<(Split, usize)> = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)]
        .iter()
        .flat_map(|&(s, n)| (0..n).map(move |i| (s, i)))
        .collect();
    let records: Vec<SampleRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(g, &(split, idx))| {
            let mut rng = sample_rng(cfg.seed, g as u64);
            let mut sample = gen_sample(cfg, &material, &mut rng)?;
            let name = format!("{}_{idx:04}", split.label());
            sample.name = name.clone();
            sample
                .structure
                .metadata
                .insert("sample".into(), serde_json::json!(name));
            let rel = format!("samples/{name}");
            sample.save(&out_dir.join(&rel))?;
            Ok(SampleRecord {
                name,
                split,
                structure: format!("{rel}/structure.json"),
                h0: format!("{rel}/h0.json"),
                ht: format!("{rel}/ht.json"),
                s: format!("{rel}/s.json"),
                fermi_level_ev: sample.fermi_level,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        generator: cfg.clone(),
        samples: records,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Tolerated Hermiticity deviation of stored containers.
pub const LOAD_HERMITIAN_TOL: f64 = 1e-8;

fn checked(h: BlockSparseHamiltonian, what: &Path) -> Result<BlockSparseHamiltonian> {
    let dev = h.hermiticity_error()?;
    if dev > LOAD_HERMITIAN_TOL {
        return Err(Error::Validation(format!(
            "{} deviates from Hermitian by {dev:e}",
            what.display()
        )));
    }
    Ok(h.symmetrize()?.0)
}

pub fn load_sample(paths: &SamplePaths, fermi_level: f64) -> Result<TrainSample> {
    let structure = CrystalStructure::load(&paths.structure, true)?;
    let mut parts = Vec::new();
    for (p, want_overlap) in [(&paths.h0, false), (&paths.ht, false), (&paths.s, true)] {
        let (h, is_overlap) = BlockSparseHamiltonian::load(p)?;
        if is_overlap != want_overlap {
            return Err(Error::parse("/is_overlap", format!("{}: unexpected overlap flag", p.display())));
        }
        if h.species() != structure.species.as_slice() {
            return Err(Error::Structural(format!(
                "{}: species differ from the structure",
                p.display()
            )));
        }
        parts.push(checked(h, p)?);
    }
    let s = parts.pop().expect("three parts");
    let ht = parts.pop().expect("three parts");
    let h0 = parts.pop().expect("three parts");
    if !h0.same_layout(&ht) || !h0.same_layout(&s) || h0.is_spinful() != ht.is_spinful() {
        return Err(Error::Structural("H0, HT and S do not share one edge set".into()));
    }
    if s.is_spinful() {
        return Err(Error::Structural("overlap must be spinless".into()));
    }
    cholesky(&s.bloch_matrix(&Vector3::zeros()))
        .map_err(|e| Error::Validation(format!("{}: S(Γ) not positive definite ({e})", paths.s.display())))?;
    Ok(TrainSample {
        name: String::new(),
        structure,
        h0,
        ht,
        s,
        fermi_level,
    })
}

/// One s orbital per site on a line: `ε(k) = eps + 2t cos(2πk)`.
pub fn one_band_chain(eps: f64, t: f64, a: f64) -> Result<TrainSample> {
    let basis = OrbitalBasis::new().with("X", &[(0, 1)])?;
    let lattice = Matrix3::new(a, 0.0, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 20.0);
    let structure = CrystalStructure::new(lattice, vec!["X".into()], vec![Vector3::zeros()])?;
    let keys = [[-1, 0, 0], [0, 0, 0], [1, 0, 0]].map(|r| EdgeKey::new(0, 0, r));
    let mut h = BlockSparseHamiltonian::zeros(basis.clone(), vec!["X".into()], keys, true)?;
    let mut s = BlockSparseHamiltonian::zeros(basis, vec!["X".into()], keys, false)?;
    for k in keys {
        let v = if k.is_onsite() { eps } else { t };
        for region in [SpinRegion::UpUp, SpinRegion::DownDown] {
            h.block_mut(&k, region).expect("key")[(0, 0)] = Complex64::new(v, 0.0);
        }
    }
    s.block_mut(&keys[1], SpinRegion::UpUp).expect("key")[(0, 0)] = Complex64::new(1.0, 0.0);
    Ok(TrainSample {
        name: "chain".into(),
        structure,
        h0: h.clone(),
        ht: h,
        s,
        fermi_level: eps,
    })
}
