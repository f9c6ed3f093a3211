use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::L_MAX;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    /// Parity of a degree-`l` spherical harmonic, (-1)^l.
    pub fn of_degree(l: usize) -> Parity {
        if l % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    pub fn product(self, other: Parity) -> Parity {
        if self == other {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    fn suffix(self) -> char {
        match self {
            Parity::Even => 'e',
            Parity::Odd => 'o',
        }
    }
}

/// A single O(3) irrep: degree `l` and parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Irrep {
    pub l: usize,
    pub parity: Parity,
}

impl Irrep {
    pub fn new(l: usize, parity: Parity) -> Self {
        Irrep { l, parity }
    }

    /// Irrep carried by a degree-`l` spherical harmonic.
    pub fn harmonic(l: usize) -> Self {
        Irrep::new(l, Parity::of_degree(l))
    }

    pub fn dim(self) -> usize {
        2 * self.l + 1
    }

    pub fn is_scalar(self) -> bool {
        self.l == 0 && self.parity == Parity::Even
    }
}

impl fmt::Display for Irrep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.l, self.parity.suffix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IrrepEntry {
    pub mul: usize,
    pub irrep: Irrep,
}

impl IrrepEntry {
    pub fn dim(&self) -> usize {
        self.mul * self.irrep.dim()
    }
}

/// Direct sum of irreps with multiplicities, e.g. `32x0e+16x1e+16x1o`.
///
/// Data laid out against a spec is entry-major, then copy, then `m = -l..=l`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IrrepSpec {
    entries: Vec<IrrepEntry>,
    offsets: Vec<usize>,
    dim: usize,
}

impl IrrepSpec {
    pub fn new(entries: Vec<IrrepEntry>) -> Result<Self> {
        for e in &entries {
            if e.mul == 0 {
                return Err(Error::Domain(format!("zero multiplicity for {}", e.irrep)));
            }
            if e.irrep.l > L_MAX {
                return Err(Error::Capability(format!(
                    "degree {} exceeds l_max = {L_MAX}",
                    e.irrep.l
                )));
            }
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut dim = 0;
        for e in &entries {
            offsets.push(dim);
            dim += e.dim();
        }
        if dim == 0 {
            return Err(Error::Domain("irrep spec has zero dimension".into()));
        }
        Ok(IrrepSpec {
            entries,
            offsets,
            dim,
        })
    }

    pub fn from_pairs(pairs: &[(usize, Irrep)]) -> Result<Self> {
        IrrepSpec::new(
            pairs
                .iter()
                .map(|&(mul, irrep)| IrrepEntry { mul, irrep })
                .collect(),
        )
    }

    /// Sorted by (l, parity) with equal irreps merged.
    pub fn normalized(&self) -> IrrepSpec {
        let mut entries = self.entries.clone();
        entries.sort_by_key(|e| e.irrep);
        let mut merged: Vec<IrrepEntry> = Vec::new();
        for e in entries {
            match merged.last_mut() {
                Some(last) if last.irrep == e.irrep => last.mul += e.mul,
                _ => merged.push(e),
            }
        }
        IrrepSpec::new(merged).expect("normalizing a valid spec")
    }

    pub fn is_normalized(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].irrep < w[1].irrep)
    }

    pub fn entries(&self) -> &[IrrepEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offset(&self, entry: usize) -> usize {
        self.offsets[entry]
    }

    /// Contiguous `(2l+1)` slice of copy `copy` of entry `entry`.
    pub fn slice(&self, entry: usize, copy: usize) -> Range<usize> {
        let e = &self.entries[entry];
        assert!(copy < e.mul, "copy index out of range");
        let d = e.irrep.dim();
        let start = self.offsets[entry] + copy * d;
        start..start + d
    }

    pub fn entry_range(&self, entry: usize) -> Range<usize> {
        self.offsets[entry]..self.offsets[entry] + self.entries[entry].dim()
    }

    /// Total multiplicity of an irrep across entries.
    pub fn multiplicity(&self, irrep: Irrep) -> usize {
        self.entries
            .iter()
            .filter(|e| e.irrep == irrep)
            .map(|e| e.mul)
            .sum()
    }

    pub fn find(&self, irrep: Irrep) -> Option<usize> {
        self.entries.iter().position(|e| e.irrep == irrep)
    }

    pub fn num_copies(&self) -> usize {
        self.entries.iter().map(|e| e.mul).sum()
    }

    pub fn lmax(&self) -> usize {
        self.entries.iter().map(|e| e.irrep.l).max().unwrap_or(0)
    }

    /// Number of `0e` channels.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.irrep.is_scalar())
            .map(|e| e.mul)
            .sum()
    }
}

impl fmt::Display for IrrepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str("+")?;
            }
            write!(f, "{}x{}", e.mul, e.irrep)?;
        }
        Ok(())
    }
}

impl FromStr for IrrepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, term) in s.split('+').enumerate() {
            let term = term.trim();
            let bad = |msg: &str| Error::parse(format!("/{k}"), format!("{msg} in irrep term {term:?}"));
            let (mul, ir) = match term.split_once('x') {
                Some((m, ir)) => (m.trim().parse::<usize>().map_err(|_| bad("bad multiplicity"))?, ir.trim()),
                None => (1, term),
            };
            let parity = match ir.chars().last() {
                Some('e') => Parity::Even,
                Some('o') => Parity::Odd,
                _ => return Err(bad("missing parity suffix")),
            };
            let l = ir[..ir.len() - 1]
                .parse::<usize>()
                .map_err(|_| bad("bad degree"))?;
            entries.push(IrrepEntry {
                mul,
                irrep: Irrep::new(l, parity),
            });
        }
        IrrepSpec::new(entries)
    }
}

impl Serialize for IrrepSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for IrrepSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A feature vector laid out against an [`IrrepSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct IrrepArray {
    spec: IrrepSpec,
    data: Vec<f64>,
}

impl IrrepArray {
    pub fn new(spec: IrrepSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.dim() {
            return Err(Error::Structural(format!(
                "data length {} does not match spec {} of dimension {}",
                data.len(),
                spec,
                spec.dim()
            )));
        }
        Ok(IrrepArray { spec, data })
    }

    pub fn zeros(spec: IrrepSpec) -> Self {
        let data = vec![0.0; spec.dim()];
        IrrepArray { spec, data }
    }

    pub fn spec(&self) -> &IrrepSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, entry: usize, copy: usize) -> &[f64] {
        &self.data[self.spec.slice(entry, copy)]
    }

    pub fn block_mut(&mut self, entry: usize, copy: usize) -> &mut [f64] {
        let r = self.spec.slice(entry, copy);
        &mut self.data[r]
    }

    /// Euclidean norm of every (entry, copy) block in layout order.
    pub fn block_norms(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.num_copies());
        for (k, e) in self.spec.entries().iter().enumerate() {
            for c in 0..e.mul {
                out.push(self.block(k, c).iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        out
    }
}
