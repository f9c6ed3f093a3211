//! Block-sparse storage of spinful Hamiltonians and overlaps keyed by `(i, j, R)`.
//!
//! Dense index order is spin slowest, then atom, shell, and `m`: orbital
//! `(atom, shell, m)` with spin `σ` sits at `σ * n_orb + offset(atom) + shell_offset + m`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::irreps::{wigner_d_rotation, RotationParity};
use crate::lattice::{EdgeKey, NeighborGraph};

pub type CMatrix = DMatrix<Complex64>;

/// Hermiticity tolerance (eV) for Bloch assembly.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// A shell of `count` orbitals sets of degree `l` (e.g. `2p` is `{l: 1, count: 2}`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Shell {
    pub l: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OrbitalBasis {
    elements: BTreeMap<String, Vec<Shell>>,
}

impl OrbitalBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element: &str, mut shells: Vec<Shell>) -> Result<()> {
        shells.sort();
        if shells.is_empty() || shells.iter().any(|s| s.count == 0) {
            return Err(Error::Domain(format!("element {element} has an empty basis")));
        }
        if shells.iter().any(|s| s.l > crate::irreps::L_MAX) {
            return Err(Error::Capability(format!("element {element} exceeds l_max")));
        }
        shells.dedup_by(|b, a| {
            if a.l == b.l {
                a.count += b.count;
                true
            } else {
                false
            }
        });
        self.elements.insert(element.to_string(), shells);
        Ok(())
    }

    pub fn with(mut self, element: &str, shells: &[(usize, usize)]) -> Result<Self> {
        self.insert(
            element,
            shells.iter().map(|&(l, count)| Shell { l, count }).collect(),
        )?;
        Ok(self)
    }

    pub fn shells(&self, element: &str) -> Result<&[Shell]> {
        self.elements
            .get(element)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Configuration(format!("element {element} has no basis entry")))
    }

    pub fn elements(&self) -> impl Iterator<Item = (&String, &Vec<Shell>)> {
        self.elements.iter()
    }

    pub fn contains(&self, element: &str) -> bool {
        self.elements.contains_key(element)
    }

    pub fn dim(&self, element: &str) -> Result<usize> {
        Ok(self
            .shells(element)?
            .iter()
            .map(|s| s.count * (2 * s.l + 1))
            .sum())
    }

    /// Every orbital set as `(l, offset)` in canonical order.
    pub fn orbital_sets(&self, element: &str) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut off = 0;
        for s in self.shells(element)? {
            for _ in 0..s.count {
                out.push((s.l, off));
                off += 2 * s.l + 1;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpinRegion {
    UpUp,
    UpDown,
    DownUp,
    DownDown,
}

impl SpinRegion {
    pub const ALL: [SpinRegion; 4] = [
        SpinRegion::UpUp,
        SpinRegion::UpDown,
        SpinRegion::DownUp,
        SpinRegion::DownDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(row spin, column spin)`, 0 = up.
    pub fn spins(self) -> (usize, usize) {
        match self {
            SpinRegion::UpUp => (0, 0),
            SpinRegion::UpDown => (0, 1),
            SpinRegion::DownUp => (1, 0),
            SpinRegion::DownDown => (1, 1),
        }
    }

    pub fn from_spins(a: usize, b: usize) -> Self {
        SpinRegion::ALL[a * 2 + b]
    }

    pub fn transposed(self) -> Self {
        let (a, b) = self.spins();
        SpinRegion::from_spins(b, a)
    }

    pub fn is_spin_flip(self) -> bool {
        matches!(self, SpinRegion::UpDown | SpinRegion::DownUp)
    }

    pub fn label(self) -> &'static str {
        match self {
            SpinRegion::UpUp => "uu",
            SpinRegion::UpDown => "ud",
            SpinRegion::DownUp => "du",
            SpinRegion::DownDown => "dd",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            SpinRegion::UpUp => "↑↑",
            SpinRegion::UpDown => "↑↓",
            SpinRegion::DownUp => "↓↑",
            SpinRegion::DownDown => "↓↓",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Real,
    Imag,
}

impl Part {
    pub fn of(self, z: Complex64) -> f64 {
        match self {
            Part::Real => z.re,
            Part::Imag => z.im,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Part::Real => "real",
            Part::Imag => "imag",
        }
    }
}

/// Complex matrix blocks over the edges of a neighbor graph.
///
/// Spinful containers hold four `n_i x n_j` blocks per edge (↑↑, ↑↓, ↓↑, ↓↓);
/// spinless ones (e.g. overlaps) hold one block that is implicitly spin-diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSparseHamiltonian {
    basis: OrbitalBasis,
    species: Vec<String>,
    spinful: bool,
    blocks: BTreeMap<EdgeKey, Vec<CMatrix>>,
}

/// Per-edge real correction blocks (n_i x n_j).
pub type EdgeCorrections = BTreeMap<EdgeKey, DMatrix<f64>>;

impl BlockSparseHamiltonian {
    /// Zero blocks on every key.
    pub fn zeros(
        basis: OrbitalBasis,
        species: Vec<String>,
        keys: impl IntoIterator<Item = EdgeKey>,
        spinful: bool,
    ) -> Result<Self> {
        let dims: Vec<usize> = species
            .iter()
            .map(|s| basis.dim(s))
            .collect::<Result<_>>()?;
        let nblk = if spinful { 4 } else { 1 };
        let mut blocks = BTreeMap::new();
        for k in keys {
            if k.i >= species.len() || k.j >= species.len() {
                return Err(Error::Structural(format!("edge {k:?} references a missing atom")));
            }
            blocks.insert(k, vec![CMatrix::zeros(dims[k.i], dims[k.j]); nblk]);
        }
        Ok(BlockSparseHamiltonian {
            basis,
            species,
            spinful,
            blocks,
        })
    }

    pub fn zeros_on_graph(
        basis: OrbitalBasis,
        species: Vec<String>,
        graph: &NeighborGraph,
        spinful: bool,
    ) -> Result<Self> {
        Self::zeros(basis, species, graph.edges.iter().map(|e| e.key()), spinful)
    }

    pub fn basis(&self) -> &OrbitalBasis {
        &self.basis
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn is_spinful(&self) -> bool {
        self.spinful
    }

    pub fn num_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn atom_dim(&self, i: usize) -> usize {
        self.basis.dim(&self.species[i]).expect("validated at construction")
    }

    /// Orbital offsets per atom (spinless index) and the total orbital count.
    pub fn atom_offsets(&self) -> (Vec<usize>, usize) {
        let mut off = Vec::with_capacity(self.species.len());
        let mut n = 0;
        for i in 0..self.species.len() {
            off.push(n);
            n += self.atom_dim(i);
        }
        (off, n)
    }

    pub fn keys(&self) -> impl Iterator<Item = &EdgeKey> {
        self.blocks.keys()
    }

    pub fn num_edges(&self) -> usize {
        self.blocks.len()
    }

    pub fn contains(&self, key: &EdgeKey) -> bool {
        self.blocks.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EdgeKey, &Vec<CMatrix>)> {
        self.blocks.iter()
    }

    pub fn block(&self, key: &EdgeKey, region: SpinRegion) -> Option<&CMatrix> {
        let blocks = self.blocks.get(key)?;
        if self.spinful {
            Some(&blocks[region.index()])
        } else if region.is_spin_flip() {
            None
        } else {
            Some(&blocks[0])
        }
    }

    /// Spinless containers only expose `UpUp`, which stands for both diagonal spins.
    pub fn block_mut(&mut self, key: &EdgeKey, region: SpinRegion) -> Option<&mut CMatrix> {
        let spinful = self.spinful;
        let blocks = self.blocks.get_mut(key)?;
        if spinful {
            Some(&mut blocks[region.index()])
        } else if region == SpinRegion::UpUp {
            Some(&mut blocks[0])
        } else {
            None
        }
    }

    pub fn blocks_mut(&mut self, key: &EdgeKey) -> Option<&mut Vec<CMatrix>> {
        self.blocks.get_mut(key)
    }

    /// Spinful copy with the spinless block on both diagonal spins and zero spin flips.
    pub fn to_spinful(&self) -> Self {
        if self.spinful {
            return self.clone();
        }
        let blocks = self
            .blocks
            .iter()
            .map(|(k, b)| {
                let z = CMatrix::zeros(b[0].nrows(), b[0].ncols());
                (*k, vec![b[0].clone(), z.clone(), z, b[0].clone()])
            })
            .collect();
        BlockSparseHamiltonian {
            basis: self.basis.clone(),
            species: self.species.clone(),
            spinful: true,
            blocks,
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.species == other.species
            && self.basis == other.basis
            && self.blocks.len() == other.blocks.len()
            && self.blocks.keys().zip(other.blocks.keys()).all(|(a, b)| a == b)
    }

    fn check_layout(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Structural(format!(
                "{what}: containers do not share basis, species and edge set"
            )));
        }
        Ok(())
    }

    /// Largest |block(i,j,R)^{σσ'} - block(j,i,-R)^{σ'σ}†| over all edges.
    pub fn hermiticity_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (k, b) in &self.blocks {
            let c = self.blocks.get(&k.conjugate()).ok_or_else(|| {
                Error::Structural(format!("edge {k:?} has no conjugate partner"))
            })?;
            for (r, m) in b.iter().enumerate() {
                let partner = if self.spinful {
                    &c[SpinRegion::ALL[r].transposed().index()]
                } else {
                    &c[0]
                };
                worst = worst.max((m - partner.adjoint()).map(|z| z.norm()).max());
            }
        }
        Ok(worst)
    }

    /// Replace each conjugate pair by its Hermitian average; also returns the
    /// largest entry adjustment.
    pub fn symmetrize(&self) -> Result<(Self, f64)> {
        let mut out = self.clone();
        let mut worst: f64 = 0.0;
        for (k, b) in &self.blocks {
            let c = self.blocks.get(&k.conjugate()).ok_or_else(|| {
                Error::Structural(format!(
                    "edge (i={}, j={}, R={:?}) has no conjugate partner",
                    k.i, k.j, k.r
                ))
            })?;
            let target = out.blocks.get_mut(k).expect("key exists");
            for (r, m) in b.iter().enumerate() {
                let partner = if self.spinful {
                    &c[SpinRegion::ALL[r].transposed().index()]
                } else {
                    &c[0]
                };
                let avg = (m + partner.adjoint()) * Complex64::new(0.5, 0.0);
                worst = worst.max((&avg - m).map(|z| z.norm()).max());
                target[r] = avg;
            }
        }
        Ok((out, worst))
    }

    pub fn scaled_add(&self, other: &Self, alpha: f64) -> Result<Self> {
        self.check_layout(other, "add")?;
        let mut out = self.clone();
        let a = Complex64::new(alpha, 0.0);
        for (k, b) in out.blocks.iter_mut() {
            let o = &other.blocks[k];
            if self.spinful == other.spinful {
                for (x, y) in b.iter_mut().zip(o) {
                    *x += y * a;
                }
            } else if self.spinful {
                b[0] += &o[0] * a;
                b[3] += &o[0] * a;
            } else {
                return Err(Error::Structural(
                    "cannot add a spinful container into a spinless one".into(),
                ));
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.scaled_add(other, -1.0)
    }

    /// All spinful entries of an edge's blocks, in region order, row-major.
    pub fn is_spin_diagonal(&self) -> bool {
        !self.spinful
            || self.blocks.values().all(|b| {
                b[1].iter().all(|z| *z == Complex64::new(0.0, 0.0))
                    && b[2].iter().all(|z| *z == Complex64::new(0.0, 0.0))
            })
    }

    /// Zero-copy read view of one spin region and part in edge order.
    pub fn spin_block_view(
        &self,
        region: SpinRegion,
        part: Part,
    ) -> Result<impl Iterator<Item = (EdgeKey, BlockPartView<'_>)>> {
        if !self.spinful {
            return Err(Error::Capability(
                "spin-region views need a spinful container".into(),
            ));
        }
        Ok(self.blocks.iter().map(move |(k, b)| {
            (
                *k,
                BlockPartView {
                    matrix: &b[region.index()],
                    part,
                },
            )
        }))
    }

    /// Dense Fourier sum `H(k) = Σ_R exp(2πi k·R) H(R)` at fractional `k`.
    /// Spinless containers produce an `n_orb` matrix, spinful ones `2 n_orb`.
    pub fn bloch_matrix(&self, k: &Vector3<f64>) -> CMatrix {
        let (off, n) = self.atom_offsets();
        let ns = if self.spinful { 2 } else { 1 };
        let mut m = CMatrix::zeros(ns * n, ns * n);
        for (key, b) in &self.blocks {
            let phase = 2.0 * PI * (k.x * key.r[0] as f64 + k.y * key.r[1] as f64 + k.z * key.r[2] as f64);
            let ph = Complex64::from_polar(1.0, phase);
            for (r, blk) in b.iter().enumerate() {
                let (sa, sb) = if self.spinful { SpinRegion::ALL[r].spins() } else { (0, 0) };
                let (r0, c0) = (sa * n + off[key.i], sb * n + off[key.j]);
                for a in 0..blk.nrows() {
                    for c in 0..blk.ncols() {
                        m[(r0 + a, c0 + c)] += ph * blk[(a, c)];
                    }
                }
            }
        }
        m
    }

    /// Rotate every orbital block by `D(l_row) B D(l_col)^T` with harmonic parity
    /// signs, moving it to the edge given by `key_map`. Spin components are
    /// carried along unrotated, so this is exact only for spin-diagonal real parts.
    pub fn transform_orbitals(
        &self,
        rp: &RotationParity,
        species: Vec<String>,
        key_map: impl Fn(&EdgeKey) -> EdgeKey,
        atom_map: &[usize],
    ) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for (k, b) in &self.blocks {
            let rot_i = orbital_rotation(&self.basis, &self.species[k.i], rp)?;
            let rot_j = orbital_rotation(&self.basis, &self.species[k.j], rp)?;
            let nb: Vec<CMatrix> = b
                .iter()
                .map(|m| {
                    let re = &rot_i * m.map(|z| z.re) * rot_j.transpose();
                    let im = &rot_i * m.map(|z| z.im) * rot_j.transpose();
                    CMatrix::from_fn(m.nrows(), m.ncols(), |a, c| Complex64::new(re[(a, c)], im[(a, c)]))
                })
                .collect();
            let nk = key_map(k);
            debug_assert_eq!(nk.i, atom_map[k.i]);
            blocks.insert(nk, nb);
        }
        Ok(BlockSparseHamiltonian {
            basis: self.basis.clone(),
            species,
            spinful: self.spinful,
            blocks,
        })
    }

    pub fn to_json_value(&self, is_overlap: bool) -> Value {
        let basis: BTreeMap<&String, Vec<[usize; 2]>> = self
            .basis
            .elements()
            .map(|(e, s)| (e, s.iter().map(|s| [s.l, s.count]).collect()))
            .collect();
        let edges: Vec<Value> = self
            .blocks
            .iter()
            .map(|(k, b)| {
                let mut blk = serde_json::Map::new();
                for (r, m) in b.iter().enumerate() {
                    let mut flat = Vec::with_capacity(2 * m.len());
                    for a in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            flat.push(m[(a, c)].re);
                            flat.push(m[(a, c)].im);
                        }
                    }
                    blk.insert(SpinRegion::ALL[r].label().to_string(), json!(flat));
                }
                json!({"i": k.i, "j": k.j, "R": k.r, "blocks": blk})
            })
            .collect();
        json!({
            "format": FORMAT_TAG,
            "is_overlap": is_overlap,
            "spinful": self.spinful,
            "basis": basis,
            "species": self.species,
            "edges": edges,
        })
    }

    /// Parse the JSON block schema; returns the container and its `is_overlap` flag.
    pub fn from_json_value(v: &Value) -> Result<(Self, bool)> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::parse("", "expected a JSON object"))?;
        let get = |name: &str| {
            obj.get(name)
                .ok_or_else(|| Error::parse(format!("/{name}"), "missing field"))
        };
        if get("format")?.as_str() != Some(FORMAT_TAG) {
            return Err(Error::parse("/format", format!("expected {FORMAT_TAG:?}")));
        }
        let is_overlap = get("is_overlap")?
            .as_bool()
            .ok_or_else(|| Error::parse("/is_overlap", "expected a boolean"))?;
        let spinful = get("spinful")?
            .as_bool()
            .ok_or_else(|| Error::parse("/spinful", "expected a boolean"))?;
        let basis_raw: BTreeMap<String, Vec<[usize; 2]>> =
            serde_json::from_value(get("basis")?.clone())
                .map_err(|e| Error::parse("/basis", e.to_string()))?;
        let mut basis = OrbitalBasis::new();
        for (e, shells) in basis_raw {
            basis.insert(&e, shells.iter().map(|s| Shell { l: s[0], count: s[1] }).collect())?;
        }
        let species: Vec<String> = serde_json::from_value(get("species")?.clone())
            .map_err(|e| Error::parse("/species", e.to_string()))?;
        let edges = get("edges")?
            .as_array()
            .ok_or_else(|| Error::parse("/edges", "expected an array"))?;
        let mut keys = Vec::with_capacity(edges.len());
        #[derive(Deserialize)]
        struct EdgeHead {
            i: usize,
            j: usize,
            #[serde(rename = "R")]
            r: [i32; 3],
        }
        for (n, e) in edges.iter().enumerate() {
            let h: EdgeHead = serde_json::from_value(e.clone())
                .map_err(|err| Error::parse(format!("/edges/{n}"), err.to_string()))?;
            keys.push(EdgeKey::new(h.i, h.j, h.r));
        }
        let mut out = BlockSparseHamiltonian::zeros(basis, species, keys.iter().copied(), spinful)?;
        let regions: &[SpinRegion] = if spinful { &SpinRegion::ALL } else { &SpinRegion::ALL[..1] };
        for (n, (e, k)) in edges.iter().zip(&keys).enumerate() {
            let (ni, nj) = (out.atom_dim(k.i), out.atom_dim(k.j));
            for (r, region) in regions.iter().enumerate() {
                let ptr = format!("/edges/{n}/blocks/{}", region.label());
                let arr = e
                    .pointer(&format!("/blocks/{}", region.label()))
                    .and_then(|x| x.as_array())
                    .ok_or_else(|| Error::parse(&ptr, "missing block"))?;
                if arr.len() != 2 * ni * nj {
                    return Err(Error::parse(
                        &ptr,
                        format!(
                            "edge (i={}, j={}, R={:?}): expected {} numbers for a {}x{} complex block, found {}",
                            k.i, k.j, k.r, 2 * ni * nj, ni, nj, arr.len()
                        ),
                    ));
                }
                let vals: Vec<f64> = arr
                    .iter()
                    .enumerate()
                    .map(|(q, x)| {
                        x.as_f64()
                            .ok_or_else(|| Error::parse(format!("{ptr}/{q}"), "expected a number"))
                    })
                    .collect::<Result<_>>()?;
                let m = &mut out.blocks.get_mut(k).expect("inserted")[r];
                for a in 0..ni {
                    for c in 0..nj {
                        let q = 2 * (a * nj + c);
                        m[(a, c)] = Complex64::new(vals[q], vals[q + 1]);
                    }
                }
            }
        }
        Ok((out, is_overlap))
    }

    pub fn save(&self, path: &Path, is_overlap: bool) -> Result<()> {
        let text = serde_json::to_string(&self.to_json_value(is_overlap)).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, bool)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::parse("", e.to_string()))?;
        Self::from_json_value(&v)
    }
}

const FORMAT_TAG: &str = "hamcorr.blocks.v1";

/// Real or imaginary part of one block, borrowed.
#[derive(Clone, Copy, Debug)]
pub struct BlockPartView<'a> {
    matrix: &'a CMatrix,
    part: Part,
}

impl BlockPartView<'_> {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.part.of(self.matrix[(r, c)])
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.matrix.iter().map(move |z| self.part.of(*z))
    }
}

/// Block-diagonal orbital rotation for one atom: `D(l)` per orbital set with
/// `(-1)^l` under inversion.
pub fn orbital_rotation(basis: &OrbitalBasis, element: &str, rp: &RotationParity) -> Result<DMatrix<f64>> {
    let n = basis.dim(element)?;
    let mut out = DMatrix::zeros(n, n);
    for (l, off) in basis.orbital_sets(element)? {
        let mut d = wigner_d_rotation(l, rp.rotation())?;
        if rp.has_inversion() && l % 2 == 1 {
            d.neg_mut();
        }
        out.view_mut((off, off), (2 * l + 1, 2 * l + 1)).copy_from(&d);
    }
    Ok(out)
}

/// `H + μ S` blockwise; `μ` only reaches the spin-diagonal blocks.
pub fn gauge_shift(
    h: &BlockSparseHamiltonian,
    s: &BlockSparseHamiltonian,
    mu: f64,
) -> Result<BlockSparseHamiltonian> {
    if !s.is_spin_diagonal() {
        return Err(Error::Structural("overlap must be spin-diagonal".into()));
    }
    h.scaled_add(s, mu)
}

/// Dense `H(k)` and `S(k)` at one k-point.
#[derive(Clone, Debug)]
pub struct DenseKMatrix {
    pub k: Vector3<f64>,
    pub h: CMatrix,
    pub s: CMatrix,
}

impl DenseKMatrix {
    /// Assemble both matrices; `S` is spin-doubled when `H` is spinful.
    pub fn assemble(
        h: &BlockSparseHamiltonian,
        s: &BlockSparseHamiltonian,
        k: &Vector3<f64>,
    ) -> Result<Self> {
        if h.species != s.species || h.basis != s.basis {
            return Err(Error::Structural("H and S describe different systems".into()));
        }
        let hk = h.bloch_matrix(k);
        let sk = if h.spinful && !s.spinful {
            s.to_spinful().bloch_matrix(k)
        } else {
            s.bloch_matrix(k)
        };
        for (name, m) in [("H", &hk), ("S", &sk)] {
            let dev = (m - m.adjoint()).map(|z| z.norm()).max();
            if dev > HERMITIAN_TOL {
                return Err(Error::Validation(format!(
                    "{name}(k) at k = {:?} deviates from Hermitian by {dev:e} eV; symmetrize the input",
                    [k.x, k.y, k.z]
                )));
            }
        }
        Ok(DenseKMatrix {
            k: *k,
            h: hk,
            s: sk,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }
}

/// `Ĥ = H0` plus a real correction on both diagonal spin blocks, symmetrized.
/// Corrections on edges at or beyond `correction_limit` Å are rejected.
pub fn assemble_prediction(
    h0: &BlockSparseHamiltonian,
    graph: &NeighborGraph,
    delta_up_real: &EdgeCorrections,
    correction_limit: f64,
) -> Result<BlockSparseHamiltonian> {
    let mut out = h0.clone();
    for (k, d) in delta_up_real {
        let idx = graph.find(*k).ok_or_else(|| {
            Error::Structural(format!("correction for edge {k:?} outside the graph"))
        })?;
        let dist = graph.edges[idx].distance;
        if dist >= correction_limit {
            return Err(Error::Validation(format!(
                "correction supplied for edge {k:?} at {dist:.3} Å, beyond the {correction_limit} Å correction limit"
            )));
        }
        let blocks = out
            .blocks
            .get_mut(k)
            .ok_or_else(|| Error::Structural(format!("edge {k:?} missing from H0")))?;
        if (d.nrows(), d.ncols()) != (blocks[0].nrows(), blocks[0].ncols()) {
            return Err(Error::Structural(format!(
                "correction for {k:?} is {}x{}, block is {}x{}",
                d.nrows(),
                d.ncols(),
                blocks[0].nrows(),
                blocks[0].ncols()
            )));
        }
        let diag: &[usize] = if h0.spinful { &[0, 3] } else { &[0] };
        for &r in diag {
            for (z, x) in blocks[r].iter_mut().zip(d.iter()) {
                z.re += x;
            }
        }
    }
    Ok(out.symmetrize()?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_neighbor_graph, CrystalStructure};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn chain(eps: f64, t: f64) -> BlockSparseHamiltonian {
        let basis = OrbitalBasis::new().with("H", &[(0, 1)]).unwrap();
        let keys = [[-1, 0, 0], [0, 0, 0], [1, 0, 0]].map(|r| EdgeKey::new(0, 0, r));
        let mut h = BlockSparseHamiltonian::zeros(basis, vec!["H".into()], keys, false).unwrap();
        for k in keys {
            h.block_mut(&k, SpinRegion::UpUp).unwrap()[(0, 0)] =
                c(if k.r == [0, 0, 0] { eps } else { t }, 0.0);
        }
        h
    }

    fn two_atom(rng: &mut ChaCha8Rng, spinful: bool, real: bool) -> (BlockSparseHamiltonian, NeighborGraph) {
        let s = CrystalStructure::new(
            Matrix3::new(3.0, 0.0, 0.0, 0.4, 3.2, 0.0, 0.1, 0.3, 3.5),
            vec!["A".into(), "B".into()],
            vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.6, 0.55, 0.7)],
        )
        .unwrap();
        let g = build_neighbor_graph(&s, 4.0).unwrap();
        let basis = OrbitalBasis::new()
            .with("A", &[(0, 1), (1, 1)])
            .unwrap()
            .with("B", &[(0, 1)])
            .unwrap();
        let mut h = BlockSparseHamiltonian::zeros_on_graph(basis, s.species.clone(), &g, spinful).unwrap();
        for (_, b) in h.blocks.iter_mut() {
            for m in b.iter_mut() {
                for z in m.iter_mut() {
                    *z = c(rng.gen::<f64>() - 0.5, if real { 0.0 } else { rng.gen::<f64>() - 0.5 });
                }
            }
        }
        (h.symmetrize().unwrap().0, g)
    }

    #[test]
    fn symmetrize_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, _) = two_atom(&mut rng, true, false);
        let (h2, adj) = h.symmetrize().unwrap();
        assert!(adj < 1e-15);
        assert!(h2.hermiticity_error().unwrap() < 1e-15);

        // explicit pair average
        let mut raw = chain(0.0, 1.0);
        raw.block_mut(&EdgeKey::new(0, 0, [1, 0, 0]), SpinRegion::UpUp).unwrap()[(0, 0)] = c(1.0, 1.0);
        raw.block_mut(&EdgeKey::new(0, 0, [-1, 0, 0]), SpinRegion::UpUp).unwrap()[(0, 0)] = c(3.0, 0.0);
        let (sym, adj) = raw.symmetrize().unwrap();
        let a = sym.block(&EdgeKey::new(0, 0, [1, 0, 0]), SpinRegion::UpUp).unwrap()[(0, 0)];
        let b = sym.block(&EdgeKey::new(0, 0, [-1, 0, 0]), SpinRegion::UpUp).unwrap()[(0, 0)];
        assert_eq!(a, c(2.0, 0.5));
        assert_eq!(b, a.conj());
        assert!((adj - (1.0f64 + 0.25).sqrt()).abs() < 1e-15);
        let twice = sym.symmetrize().unwrap().0;
        assert_eq!(twice, sym);

        let mut missing = chain(0.0, 1.0);
        missing.blocks.remove(&EdgeKey::new(0, 0, [-1, 0, 0]));
        let err = missing.symmetrize().unwrap_err();
        assert!(err.to_string().contains("R=[1, 0, 0]"), "{err}");
    }

    #[test]
    fn one_band_chain_dispersion() {
        let (eps, t) = (0.3, -1.1);
        let h = chain(eps, t);
        for n in 0..7 {
            let k = n as f64 / 7.0;
            let hk = h.bloch_matrix(&Vector3::new(k, 0.0, 0.0));
            let expected = eps + 2.0 * t * (2.0 * PI * k).cos();
            assert!((hk[(0, 0)].re - expected).abs() < 1e-14);
            assert!(hk[(0, 0)].im.abs() < 1e-14);
        }
    }

    #[test]
    fn bloch_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h1, _) = two_atom(&mut rng, false, true);
        let (h2, _) = two_atom(&mut rng, false, true);
        let k = Vector3::new(0.13, -0.31, 0.42);
        let a = h1.bloch_matrix(&k);
        let b = h1.bloch_matrix(&(-k));
        assert!((a.map(|z| z.conj()) - b).map(|z| z.norm()).max() < 1e-13);
        let sum = h1.scaled_add(&h2, 1.0).unwrap().bloch_matrix(&k);
        assert!((sum - (a.clone() + h2.bloch_matrix(&k))).map(|z| z.norm()).max() < 1e-13);
        assert!((&a - a.adjoint()).map(|z| z.norm()).max() < 1e-13);

        // only R = 0 blocks → k-independent
        let mut onsite = h1.clone();
        onsite.blocks.retain(|k, _| k.r == [0, 0, 0]);
        let x = onsite.bloch_matrix(&k);
        assert_eq!(x, onsite.bloch_matrix(&Vector3::zeros()));
    }

    #[test]
    fn gauge_shift_commutes_with_bloch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, _) = two_atom(&mut rng, true, false);
        let (s, _) = two_atom(&mut rng, false, true);
        let k = Vector3::new(0.25, 0.1, -0.2);
        let mu = 0.7;
        assert_eq!(gauge_shift(&h, &s, 0.0).unwrap(), h);
        let lhs = DenseKMatrix::assemble(&gauge_shift(&h, &s, mu).unwrap(), &s, &k).unwrap();
        let base = DenseKMatrix::assemble(&h, &s, &k).unwrap();
        let rhs = &base.h + &base.s * c(mu, 0.0);
        assert!((lhs.h - rhs).map(|z| z.norm()).max() < 1e-13);

        let mut ident = BlockSparseHamiltonian::zeros(
            s.basis().clone(),
            s.species().to_vec(),
            s.keys().copied(),
            false,
        )
        .unwrap();
        for (k, b) in ident.blocks.iter_mut() {
            if k.is_onsite() {
                b[0].fill_with_identity();
            }
        }
        let shifted = gauge_shift(&h, &ident, 1.0).unwrap();
        for (k, b) in shifted.iter() {
            let diff = &b[0] - h.block(k, SpinRegion::UpUp).unwrap();
            let expected = if k.is_onsite() {
                CMatrix::identity(diff.nrows(), diff.ncols())
            } else {
                CMatrix::zeros(diff.nrows(), diff.ncols())
            };
            assert!((diff - expected).map(|z| z.norm()).max() < 1e-15);
        }
    }

    #[test]
    fn spin_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, _) = two_atom(&mut rng, false, true);
        assert!(matches!(
            h.spin_block_view(SpinRegion::UpUp, Part::Real),
            Err(Error::Capability(_))
        ));
        let sp = h.to_spinful();
        for region in [SpinRegion::UpDown, SpinRegion::DownUp] {
            for (_, v) in sp.spin_block_view(region, Part::Real).unwrap() {
                assert!(v.values().all(|x| x == 0.0));
            }
        }
        // squared norms of a region match the dense reference
        let (hs, _) = two_atom(&mut rng, true, false);
        let dense = hs.bloch_matrix(&Vector3::zeros());
        let _ = dense;
        for region in SpinRegion::ALL {
            let mut view_sum = 0.0;
            for (_, v) in hs.spin_block_view(region, Part::Real).unwrap() {
                view_sum += v.values().map(|x| x * x).sum::<f64>();
            }
            for (_, v) in hs.spin_block_view(region, Part::Imag).unwrap() {
                view_sum += v.values().map(|x| x * x).sum::<f64>();
            }
            let direct: f64 = hs
                .iter()
                .map(|(_, b)| b[region.index()].iter().map(|z| z.norm_sqr()).sum::<f64>())
                .sum();
            assert!((view_sum - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_prediction_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h0, g) = two_atom(&mut rng, true, false);
        let none = EdgeCorrections::new();
        assert_eq!(assemble_prediction(&h0, &g, &none, 6.0).unwrap(), h0);

        let mut ht = h0.clone();
        let mut corr = EdgeCorrections::new();
        for e in &g.edges {
            let n = (h0.atom_dim(e.i), h0.atom_dim(e.j));
            let d = DMatrix::from_fn(n.0, n.1, |_, _| rng.gen::<f64>() - 0.5);
            corr.insert(e.key(), d);
        }
        // symmetrize the correction itself
        let mut sym = EdgeCorrections::new();
        for (k, d) in &corr {
            sym.insert(*k, (d + corr[&k.conjugate()].transpose()) * 0.5);
        }
        for (k, d) in &sym {
            for r in [0, 3] {
                for (z, x) in ht.blocks.get_mut(k).unwrap()[r].iter_mut().zip(d.iter()) {
                    z.re += x;
                }
            }
        }
        let pred = assemble_prediction(&h0, &g, &sym, 6.0).unwrap();
        assert!(pred.hermiticity_error().unwrap() < 1e-12);
        for (k, b) in pred.iter() {
            let target = ht.block(k, SpinRegion::UpUp).unwrap();
            assert!((b[0].map(|z| z.re) - target.map(|z| z.re)).amax() < 1e-12);
            assert_eq!(b[1], *h0.block(k, SpinRegion::UpDown).unwrap());
        }
        let mut far = EdgeCorrections::new();
        let e = g.edges.iter().find(|e| e.distance > 2.0).unwrap();
        far.insert(e.key(), DMatrix::zeros(h0.atom_dim(e.i), h0.atom_dim(e.j)));
        assert!(matches!(
            assemble_prediction(&h0, &g, &far, 2.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn json_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, _) = two_atom(&mut rng, true, false);
        let v = h.to_json_value(false);
        let (back, is_overlap) = BlockSparseHamiltonian::from_json_value(&v).unwrap();
        assert!(!is_overlap);
        assert_eq!(back, h);

        let mut bad = v.clone();
        let arr = bad["edges"][2]["blocks"]["ud"].as_array_mut().unwrap();
        arr.pop();
        let err = BlockSparseHamiltonian::from_json_value(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/edges/2/blocks/ud"), "{msg}");
        assert!(msg.contains("edge (i="), "{msg}");
    }
}
