//! Periodic crystal structures, cutoff neighbor graphs with lattice-image
//! bookkeeping, and reciprocal-space sampling.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer lattice translation.
pub type LatticeVec = [i32; 3];

pub fn neg(r: LatticeVec) -> LatticeVec {
    [-r[0], -r[1], -r[2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    /// Rows are the lattice vectors, in Å.
    pub lattice: Matrix3<f64>,
    pub species: Vec<String>,
    pub frac_coords: Vec<Vector3<f64>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StructureFile {
    lattice: [[f64; 3]; 3],
    species: Vec<String>,
    frac_coords: Vec<[f64; 3]>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

impl CrystalStructure {
    pub fn new(
        lattice: Matrix3<f64>,
        species: Vec<String>,
        frac_coords: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let s = CrystalStructure {
            lattice,
            species,
            frac_coords,
            metadata: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::Domain("structure has no atoms".into()));
        }
        if self.species.len() != self.frac_coords.len() {
            return Err(Error::Structural(format!(
                "{} species but {} coordinates",
                self.species.len(),
                self.frac_coords.len()
            )));
        }
        let det = self.lattice.determinant();
        if !(det > 1e-8) {
            return Err(Error::Domain(format!(
                "lattice determinant {det} is not positive"
            )));
        }
        for (i, f) in self.frac_coords.iter().enumerate() {
            if f.iter().any(|&c| !(0.0..1.0).contains(&c)) {
                return Err(Error::Domain(format!(
                    "fractional coordinate of atom {i} outside [0, 1): {f:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn volume(&self) -> f64 {
        self.lattice.determinant()
    }

    /// Cartesian position of atom `i` in the home cell.
    pub fn cart(&self, i: usize) -> Vector3<f64> {
        self.lattice.transpose() * self.frac_coords[i]
    }

    /// Cartesian vector of a lattice translation.
    pub fn lattice_cart(&self, r: LatticeVec) -> Vector3<f64> {
        self.lattice.transpose() * Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64)
    }

    /// Rows `b_i` with `a_i · b_j = 2π δ_ij`, in reciprocal Å.
    pub fn reciprocal(&self) -> Matrix3<f64> {
        let inv = self
            .lattice
            .try_inverse()
            .expect("validated lattice is invertible");
        inv.transpose() * (2.0 * std::f64::consts::PI)
    }

    /// Spacing between adjacent lattice planes normal to each reciprocal vector.
    pub fn plane_spacings(&self) -> [f64; 3] {
        let b = self.reciprocal();
        let tau = 2.0 * std::f64::consts::PI;
        [0, 1, 2].map(|k| tau / b.row(k).norm())
    }

    /// Wrap fractional coordinates into [0, 1).
    pub fn wrap(f: Vector3<f64>) -> Vector3<f64> {
        f.map(|c| {
            let w = c - c.floor();
            if w >= 1.0 {
                0.0
            } else {
                w
            }
        })
    }

    pub fn from_json_str(text: &str, strict: bool) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("", e.to_string()))?;
        Self::from_json_value(value, strict)
    }

    pub fn from_json_value(mut value: serde_json::Value, strict: bool) -> Result<Self> {
        if !strict {
            if let Some(obj) = value.as_object_mut() {
                obj.retain(|k, _| {
                    matches!(k.as_str(), "lattice" | "species" | "frac_coords" | "metadata")
                });
            }
        }
        let file: StructureFile =
            serde_json::from_value(value).map_err(|e| Error::parse("", e.to_string()))?;
        let s = CrystalStructure {
            lattice: Matrix3::from_fn(|r, c| file.lattice[r][c]),
            species: file.species,
            frac_coords: file.frac_coords.into_iter().map(Vector3::from).collect(),
            metadata: file.metadata,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let file = StructureFile {
            lattice: [0, 1, 2].map(|r| [0, 1, 2].map(|c| self.lattice[(r, c)])),
            species: self.species.clone(),
            frac_coords: self.frac_coords.iter().map(|f| [f.x, f.y, f.z]).collect(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_value(file).expect("structure serializes")
    }

    pub fn load(path: &Path, strict: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, strict)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json_value()).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Directed edge from atom `i` in the home cell to atom `j` in cell `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub r: LatticeVec,
    /// `x_j + R - x_i` in Å.
    pub displacement: Vector3<f64>,
    pub distance: f64,
}

impl Edge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            i: self.i,
            j: self.j,
            r: self.r,
        }
    }
}

/// `(i, j, R)` ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub i: usize,
    pub j: usize,
    pub r: LatticeVec,
}

impl EdgeKey {
    pub fn new(i: usize, j: usize, r: LatticeVec) -> Self {
        EdgeKey { i, j, r }
    }

    pub fn conjugate(&self) -> EdgeKey {
        EdgeKey {
            i: self.j,
            j: self.i,
            r: neg(self.r),
        }
    }

    pub fn is_onsite(&self) -> bool {
        self.i == self.j && self.r == [0, 0, 0]
    }
}

#[derive(Clone, Debug)]
pub struct NeighborGraph {
    pub cutoff: f64,
    pub edges: Vec<Edge>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn find(&self, key: EdgeKey) -> Option<usize> {
        self.edges.binary_search_by(|e| e.key().cmp(&key)).ok()
    }

    /// Index of the `(j, i, -R)` partner of every edge.
    pub fn conjugate_indices(&self) -> Vec<usize> {
        self.edges
            .iter()
            .map(|e| {
                self.find(e.key().conjugate())
                    .expect("neighbor graphs are closed under conjugation")
            })
            .collect()
    }
}

/// All periodic-image pairs within `cutoff`, sorted by `(i, j, R)`.
pub fn build_neighbor_graph(s: &CrystalStructure, cutoff: f64) -> Result<NeighborGraph> {
    if !(cutoff > 0.0) {
        return Err(Error::Domain(format!("cutoff {cutoff} must be positive")));
    }
    let det = s.lattice.determinant();
    if !(det > 1e-8) {
        return Err(Error::Domain(format!("degenerate lattice (det = {det})")));
    }
    let spacing = s.plane_spacings();
    // fractional differences lie in (-1, 1), hence the extra image
    let reach = spacing.map(|d| (cutoff / d).ceil() as i32 + 1);
    let lt = s.lattice.transpose();
    let mut edges = Vec::new();
    for i in 0..s.num_atoms() {
        for j in 0..s.num_atoms() {
            let df = s.frac_coords[j] - s.frac_coords[i];
            for a in -reach[0]..=reach[0] {
                for b in -reach[1]..=reach[1] {
                    for c in -reach[2]..=reach[2] {
                        let f = df + Vector3::new(a as f64, b as f64, c as f64);
                        let d = lt * f;
                        let dist = d.norm();
                        if dist <= cutoff {
                            edges.push(Edge {
                                i,
                                j,
                                r: [a, b, c],
                                displacement: d,
                                distance: dist,
                            });
                        }
                    }
                }
            }
        }
    }
    edges.sort_by(|x, y| x.key().cmp(&y.key()));
    Ok(NeighborGraph { cutoff, edges })
}

/// Γ-centered uniform grid in fractional coordinates, first index slowest.
pub fn kmesh(divisions: [usize; 3]) -> Result<Vec<Vector3<f64>>> {
    if divisions.iter().any(|&n| n == 0) {
        return Err(Error::Domain(format!("mesh divisions {divisions:?} must be positive")));
    }
    let mut out = Vec::with_capacity(divisions.iter().product());
    for a in 0..divisions[0] {
        for b in 0..divisions[1] {
            for c in 0..divisions[2] {
                out.push(Vector3::new(
                    a as f64 / divisions[0] as f64,
                    b as f64 / divisions[1] as f64,
                    c as f64 / divisions[2] as f64,
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSegment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub n_points: usize,
    #[serde(default)]
    pub labels: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KPath {
    pub segments: Vec<KSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSample {
    pub k: Vector3<f64>,
    /// Cumulative path length in reciprocal Å.
    pub arclength: f64,
}

impl KPath {
    pub fn new(segments: Vec<KSegment>) -> Result<Self> {
        let p = KPath { segments };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Domain("k-path has no segments".into()));
        }
        for (n, s) in self.segments.iter().enumerate() {
            if s.n_points < 2 {
                return Err(Error::Domain(format!(
                    "segment {n} has {} points, need at least 2",
                    s.n_points
                )));
            }
        }
        Ok(())
    }

    /// Straight path through `points` with `n_points` per segment.
    pub fn through(points: &[[f64; 3]], n_points: usize) -> Result<Self> {
        KPath::new(
            points
                .windows(2)
                .map(|w| KSegment {
                    start: w[0],
                    end: w[1],
                    n_points,
                    labels: None,
                })
                .collect(),
        )
    }
}

/// Sample a k-path. Arclength uses the reciprocal metric of `s`; a segment whose
/// start repeats the previous end does not duplicate that point, and a
/// discontinuous jump between segments adds no length.
pub fn sample_kpath(s: &CrystalStructure, path: &KPath) -> Result<Vec<KSample>> {
    path.validate()?;
    let b = s.reciprocal().transpose();
    let mut out: Vec<KSample> = Vec::new();
    for seg in &path.segments {
        let (k0, k1) = (Vector3::from(seg.start), Vector3::from(seg.end));
        for p in 0..seg.n_points {
            let t = p as f64 / (seg.n_points - 1) as f64;
            let k = k0 + (k1 - k0) * t;
            match out.last() {
                Some(prev) if p == 0 && (prev.k - k).amax() < 1e-12 => continue,
                Some(prev) => {
                    let step = if p == 0 { 0.0 } else { (b * (k - prev.k)).norm() };
                    out.push(KSample {
                        k,
                        arclength: prev.arclength + step,
                    });
                }
                None => out.push(KSample { k, arclength: 0.0 }),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cubic(a: f64, coords: &[[f64; 3]]) -> CrystalStructure {
        CrystalStructure::new(
            Matrix3::identity() * a,
            coords.iter().map(|_| "X".to_string()).collect(),
            coords.iter().map(|&c| Vector3::from(c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn isolated_atom_has_only_self_edge() {
        let g = build_neighbor_graph(&cubic(10.0, &[[0.0; 3]]), 8.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.edges[0].key(), EdgeKey::new(0, 0, [0, 0, 0]));
        assert_eq!(g.edges[0].distance, 0.0);
    }

    #[test]
    fn simple_cubic_shells() {
        // oracle: enumerate |R| <= 3 by brute force
        let a = 5.0;
        let mut expected = Vec::new();
        for x in -3i32..=3 {
            for y in -3i32..=3 {
                for z in -3i32..=3 {
                    let d = a * ((x * x + y * y + z * z) as f64).sqrt();
                    if d <= 8.0 {
                        expected.push(([x, y, z], d));
                    }
                }
            }
        }
        assert_eq!(expected.len(), 19);
        let g = build_neighbor_graph(&cubic(a, &[[0.0; 3]]), 8.0).unwrap();
        assert_eq!(g.len(), 19);
        assert_eq!(g.edges.iter().filter(|e| (e.distance - 5.0).abs() < 1e-12).count(), 6);
        let r2 = 5.0 * 2f64.sqrt();
        assert_eq!(g.edges.iter().filter(|e| (e.distance - r2).abs() < 1e-12).count(), 12);
        for (r, d) in expected {
            let k = g.find(EdgeKey::new(0, 0, r)).unwrap();
            assert!((g.edges[k].distance - d).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_is_sorted_and_rejects_bad_input() {
        let s = cubic(3.0, &[[0.0; 3], [0.5, 0.5, 0.5]]);
        let g = build_neighbor_graph(&s, 4.0).unwrap();
        assert!(g.edges.windows(2).all(|w| w[0].key() < w[1].key()));
        assert!(build_neighbor_graph(&s, 0.0).is_err());
        let mut flat = s.clone();
        flat.lattice[(2, 2)] = 0.0;
        assert!(build_neighbor_graph(&flat, 4.0).is_err());
    }

    #[test]
    fn kmesh_examples() {
        assert_eq!(kmesh([1, 1, 1]).unwrap(), vec![Vector3::zeros()]);
        assert_eq!(
            kmesh([2, 1, 1]).unwrap(),
            vec![Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)]
        );
        let m = kmesh([6, 6, 6]).unwrap();
        assert_eq!(m.len(), 216);
        let key = |k: &Vector3<f64>| [0, 1, 2].map(|c| (k[c] * 6.0).round() as i64);
        let set: std::collections::BTreeSet<_> = m.iter().map(key).collect();
        for axis in 0..3 {
            for k in &m {
                let mut s = *k;
                s[axis] = (s[axis] + 0.5) % 1.0;
                assert!(set.contains(&key(&s)));
            }
        }
        assert!(kmesh([0, 1, 1]).is_err());
    }

    #[test]
    fn kpath_sampling() {
        let s = cubic(5.0, &[[0.0; 3]]);
        let gx = KPath::through(&[[0.0; 3], [0.5, 0.0, 0.0]], 2).unwrap();
        let pts = sample_kpath(&s, &gx).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[1].arclength - PI / 5.0).abs() < 1e-14);

        let path = KPath::through(&[[0.0; 3], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0]], 11).unwrap();
        let pts = sample_kpath(&s, &path).unwrap();
        assert_eq!(pts.len(), 21);
        assert!(pts.windows(2).all(|w| w[1].arclength >= w[0].arclength));
        assert!(KPath::through(&[[0.0; 3], [0.5, 0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn structure_json_round_trip_and_strictness() {
        let s = cubic(4.0, &[[0.0; 3], [0.25, 0.5, 0.75]]);
        let mut v = s.to_json_value();
        assert_eq!(CrystalStructure::from_json_value(v.clone(), true).unwrap(), s);
        v["extra"] = serde_json::json!(1);
        assert!(CrystalStructure::from_json_value(v.clone(), true).is_err());
        assert_eq!(CrystalStructure::from_json_value(v, false).unwrap(), s);
    }
}
