use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector; each registered tensor owns a contiguous row-major range.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub values: Vec<f64>,
    pub registry: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(3 / fan_in)`.
    FanIn(usize),
}

impl Parameters {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register a tensor and return its index.
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> usize {
        let offset = self.values.len();
        let n = rows * cols;
        match init {
            Init::Zeros => self.values.extend(std::iter::repeat(0.0).take(n)),
            Init::Ones => self.values.extend(std::iter::repeat(1.0).take(n)),
            Init::FanIn(fan) => {
                let a = (3.0 / fan.max(1) as f64).sqrt();
                for _ in 0..n {
                    self.values.push(rng.gen_range(-a..a));
                }
            }
        }
        self.registry.push(ParamEntry {
            name: name.into(),
            offset,
            rows,
            cols,
        });
        self.registry.len() - 1
    }

    /// Register a tensor with explicit initial values.
    pub fn add_values(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> usize {
        assert_eq!(values.len(), rows * cols);
        let offset = self.values.len();
        self.values.extend(values);
        self.registry.push(ParamEntry {
            name: name.into(),
            offset,
            rows,
            cols,
        });
        self.registry.len() - 1
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.registry[idx]
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        let e = &self.registry[idx];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.registry.iter().position(|e| e.name == name)
    }

    /// Registry offsets must tile the vector with no gaps or overlaps.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for e in &self.registry {
            if e.offset != next {
                return Err(Error::Structural(format!(
                    "parameter {} starts at {} but the previous tensor ends at {next}",
                    e.name, e.offset
                )));
            }
            next += e.len();
        }
        if next != self.values.len() {
            return Err(Error::Structural(format!(
                "registry covers {next} values, vector holds {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Bind every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.registry
            .iter()
            .map(|e| {
                let m = Mat::from_row_slice(e.rows, e.cols, &self.values[e.offset..e.offset + e.len()]);
                tape.leaf(m, e.offset)
            })
            .collect()
    }

    pub fn global_norm(g: &[f64]) -> f64 {
        g.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_partitions_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Parameters::default();
        p.add("a", 2, 3, Init::FanIn(3), &mut rng);
        p.add("b", 1, 4, Init::Zeros, &mut rng);
        p.add("c", 1, 2, Init::Ones, &mut rng);
        p.validate().unwrap();
        assert_eq!(p.len(), 12);
        assert_eq!(p.slice(2), &[1.0, 1.0]);
        assert!(p.slice(0).iter().all(|x| x.abs() <= 1.0));
        p.registry[1].offset += 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn bound_leaves_map_gradients_to_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Parameters::default();
        p.add("w", 2, 3, Init::FanIn(3), &mut rng);
        p.add("v", 3, 1, Init::FanIn(3), &mut rng);
        let mut t = Tape::new();
        let vars = p.bind(&mut t);
        let m = t.matmul(vars[0], vars[1]);
        let s = t.sum(m);
        let grads = t.backward(s);
        let g = t.parameter_gradient(&grads, p.len());
        // d/dw[a,b] = v[b]
        for a in 0..2 {
            for b in 0..3 {
                assert_eq!(g[a * 3 + b], p.values[6 + b]);
            }
        }
    }
}
