//! Padded orbital layout shared by every element, and the constant CG map
//! between orbital blocks and irrep channels.

use std::collections::BTreeMap;

use super::tape::Mat;
use crate::error::{Error, Result};
use crate::hamiltonian::OrbitalBasis;
use crate::irreps::{clebsch_gordan, Irrep, IrrepEntry, IrrepSpec, Parity};

#[derive(Clone, Debug)]
pub struct BasisLayout {
    /// `(l, offset)` of every padded orbital set.
    pub sets: Vec<(usize, usize)>,
    pub dim: usize,
    pub elements: Vec<String>,
    /// Per element, the padded index of each of its orbitals.
    pub orbital_map: Vec<Vec<usize>>,
    /// Irrep channels of a padded block.
    pub block_spec: IrrepSpec,
    /// `block_dim x dim²`; rows are channels, columns row-major block entries.
    pub decode: Mat,
}

impl BasisLayout {
    pub fn new(basis: &OrbitalBasis) -> Result<Self> {
        let elements: Vec<String> = basis.elements().map(|(e, _)| e.clone()).collect();
        if elements.is_empty() {
            return Err(Error::Configuration("orbital basis lists no elements".into()));
        }
        // slots per degree
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        let mut per_elem_sets = Vec::new();
        for e in &elements {
            let sets = basis.orbital_sets(e)?;
            let mut count: BTreeMap<usize, usize> = BTreeMap::new();
            let mut tagged = Vec::new();
            for (l, off) in sets {
                let slot = count.entry(l).or_insert(0);
                tagged.push((l, *slot, off));
                *slot += 1;
            }
            for (l, c) in count {
                let s = slots.entry(l).or_insert(0);
                *s = (*s).max(c);
            }
            per_elem_sets.push(tagged);
        }
        let mut sets = Vec::new();
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut dim = 0;
        for (&l, &n) in &slots {
            for s in 0..n {
                index.insert((l, s), sets.len());
                sets.push((l, dim));
                dim += 2 * l + 1;
            }
        }
        let mut orbital_map = Vec::new();
        for tagged in &per_elem_sets {
            let n: usize = tagged.iter().map(|(l, _, _)| 2 * l + 1).sum();
            let mut map = vec![0; n];
            for &(l, slot, off) in tagged {
                let (_, poff) = sets[index[&(l, slot)]];
                for m in 0..2 * l + 1 {
                    map[off + m] = poff + m;
                }
            }
            orbital_map.push(map);
        }

        // channel order: irreps sorted, then set pairs
        let mut channels: BTreeMap<Irrep, Vec<(usize, usize)>> = BTreeMap::new();
        for (a, &(la, _)) in sets.iter().enumerate() {
            for (b, &(lb, _)) in sets.iter().enumerate() {
                let parity = Parity::of_degree(la + lb);
                for l in la.abs_diff(lb)..=la + lb {
                    channels.entry(Irrep::new(l, parity)).or_default().push((a, b));
                }
            }
        }
        let entries: Vec<IrrepEntry> = channels
            .iter()
            .map(|(ir, pairs)| IrrepEntry { mul: pairs.len(), irrep: *ir })
            .collect();
        let block_spec = IrrepSpec::new(entries)?;
        let mut decode = Mat::zeros(block_spec.dim(), dim * dim);
        for (k, (ir, pairs)) in channels.iter().enumerate() {
            for (c, &(a, b)) in pairs.iter().enumerate() {
                let (la, oa) = sets[a];
                let (lb, ob) = sets[b];
                let cg = clebsch_gordan(la, lb, ir.l)?;
                let row0 = block_spec.slice(k, c).start;
                for &(ma, mb, m, v) in cg.nonzeros() {
                    decode[(row0 + m, (oa + ma) * dim + ob + mb)] = v;
                }
            }
        }
        Ok(BasisLayout {
            sets,
            dim,
            elements,
            orbital_map,
            block_spec,
            decode,
        })
    }

    pub fn element_index(&self, name: &str) -> Result<usize> {
        self.elements
            .iter()
            .position(|e| e == name)
            .ok_or_else(|| Error::Configuration(format!("element {name:?} has no basis entry")))
    }

    /// Embed an element-sized block into the padded layout (row-major).
    pub fn pad(&self, ei: usize, ej: usize, block: &Mat) -> Vec<f64> {
        let p = self.dim;
        let mut out = vec![0.0; p * p];
        for (a, &pa) in self.orbital_map[ei].iter().enumerate() {
            for (b, &pb) in self.orbital_map[ej].iter().enumerate() {
                out[pa * p + pb] = block[(a, b)];
            }
        }
        out
    }

    /// Inverse of [`pad`](Self::pad).
    pub fn unpad(&self, ei: usize, ej: usize, padded: &[f64]) -> Mat {
        let p = self.dim;
        let (ri, rj) = (&self.orbital_map[ei], &self.orbital_map[ej]);
        Mat::from_fn(ri.len(), rj.len(), |a, b| padded[ri[a] * p + rj[b]])
    }

    pub fn mask(&self, ei: usize, ej: usize) -> Vec<f64> {
        let ones = Mat::from_element(self.orbital_map[ei].len(), self.orbital_map[ej].len(), 1.0);
        self.pad(ei, ej, &ones)
    }

    /// Irrep channels of a padded block.
    pub fn decompose(&self, padded: &[f64]) -> Vec<f64> {
        (&self.decode * nalgebra::DVector::from_column_slice(padded)).as_slice().to_vec()
    }

    /// Column permutation transposing a row-major padded block.
    pub fn transpose_perm(&self) -> Vec<usize> {
        let p = self.dim;
        (0..p * p).map(|c| (c % p) * p + c / p).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::orbital_rotation;
    use crate::irreps::{transform, IrrepArray, RotationParity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> OrbitalBasis {
        OrbitalBasis::new()
            .with("A", &[(0, 1)])
            .unwrap()
            .with("B", &[(0, 1), (1, 1)])
            .unwrap()
            .with("C", &[(0, 2), (1, 1), (2, 1)])
            .unwrap()
    }

    #[test]
    fn padded_layout_and_round_trip() {
        let lay = BasisLayout::new(&basis()).unwrap();
        assert_eq!(lay.dim, 1 + 1 + 3 + 5);
        assert_eq!(lay.orbital_map[0], vec![0]);
        assert_eq!(lay.orbital_map[1], vec![0, 2, 3, 4]);
        assert_eq!(lay.block_spec.dim(), lay.dim * lay.dim);
        // full CG map is orthogonal
        let g = &lay.decode * lay.decode.transpose();
        assert!((g - Mat::identity(lay.dim * lay.dim, lay.dim * lay.dim)).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Mat::from_fn(4, 10, |_, _| rng.gen::<f64>() - 0.5);
        let p = lay.pad(1, 2, &b);
        let y = lay.decompose(&p);
        let back = lay.decode.transpose() * nalgebra::DVector::from_column_slice(&y);
        assert!((lay.unpad(1, 2, back.as_slice()) - b).amax() < 1e-12);
        assert!(matches!(lay.element_index("Z"), Err(Error::Configuration(_))));
    }

    #[test]
    fn channels_rotate_as_irreps() {
        let bs = basis();
        let lay = BasisLayout::new(&bs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Mat::from_fn(10, 4, |_, _| rng.gen::<f64>() - 0.5);
        for inv in [false, true] {
            let rp = RotationParity::from_uniforms([0.2, 0.5, 0.8], inv);
            let ri = orbital_rotation(&bs, "C", &rp).unwrap();
            let rj = orbital_rotation(&bs, "B", &rp).unwrap();
            let rotated = &ri * &b * rj.transpose();
            let y = IrrepArray::new(lay.block_spec.clone(), lay.decompose(&lay.pad(2, 1, &b))).unwrap();
            let y2 = lay.decompose(&lay.pad(2, 1, &rotated));
            let t = transform(&y, &rp);
            let err = t.data().iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
    }
}
