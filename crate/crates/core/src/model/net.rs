use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::basis::BasisLayout;
use super::equiv::{concat_specs, head_scale, EqNorm, EquivLinear, Gate, ShTensorProduct};
use super::params::{Init, ParamEntry, Parameters};
use super::tape::{Mat, Tape, Var};
use super::tracegrad::TraceGrad;
use crate::error::{Error, Result};
use crate::hamiltonian::{BlockSparseHamiltonian, EdgeCorrections, OrbitalBasis, SpinRegion};
use crate::irreps::{sph_harm_upto, Irrep, IrrepSpec, Parity, L_MAX};
use crate::lattice::{build_neighbor_graph, CrystalStructure, EdgeKey, NeighborGraph};

pub const CHECKPOINT_FORMAT: &str = "hamcorr.checkpoint.v1";
pub const DEFAULT_FEATURE_SPEC: &str = "32x0e+16x1e+16x1o+8x2e+8x2o+8x3e+8x3o+8x4e+8x4o+1x5o+1x6e";
const ELEMENT_EMBEDDING_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub feature_spec: IrrepSpec,
    pub n_heads: usize,
    pub gaussian_basis: usize,
    pub invariant_dim: usize,
    pub cutoff: f64,
    pub ensemble_intervals: Vec<[f64; 2]>,
    /// Highest harmonic degree of the bond-direction expansion.
    pub sh_lmax: usize,
    pub attention_hidden: usize,
    /// Learned element embeddings replace the H0 channels.
    pub element_embedding: bool,
    /// Regress the target blocks instead of the correction.
    pub direct_target: bool,
    pub tracegrad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 4,
            feature_spec: DEFAULT_FEATURE_SPEC.parse().expect("default spec"),
            n_heads: 4,
            gaussian_basis: 64,
            invariant_dim: 256,
            cutoff: 8.0,
            ensemble_intervals: vec![[0.0, 1.0], [1.0, 2.0], [2.0, 4.0], [4.0, 6.0]],
            sh_lmax: 2,
            attention_hidden: 64,
            element_embedding: false,
            direct_target: false,
            tracegrad: true,
        }
    }
}

impl ModelConfig {
    /// A smaller network that trains a few hundred cells in about an hour on one core.
    pub fn desk() -> Self {
        ModelConfig {
            n_blocks: 3,
            feature_spec: "16x0e+8x1o+8x1e+4x2e+4x2o+2x3e+2x3o+1x4e".parse().expect("static spec"),
            gaussian_basis: 16,
            invariant_dim: 32,
            cutoff: 6.0,
            ensemble_intervals: vec![[0.0, 1.0], [1.0, 2.0], [2.0, 4.0], [4.0, 6.0]],
            attention_hidden: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Configuration(m));
        if self.n_blocks == 0 || self.n_heads == 0 || self.gaussian_basis == 0 || self.invariant_dim == 0 || self.attention_hidden == 0 {
            return cfg("n_blocks, n_heads, gaussian_basis, invariant_dim and attention_hidden must be positive".into());
        }
        if !(self.cutoff > 0.0) {
            return cfg(format!("cutoff {} must be positive", self.cutoff));
        }
        if self.sh_lmax > L_MAX {
            return cfg(format!("sh_lmax {} exceeds {L_MAX}", self.sh_lmax));
        }
        if self.feature_spec.num_scalars() == 0 {
            return cfg(format!("feature spec {} has no 0e channel", self.feature_spec));
        }
        if self.ensemble_intervals.is_empty() {
            return cfg("at least one ensemble interval is required".into());
        }
        let mut prev = f64::NEG_INFINITY;
        for (k, &[lo, hi]) in self.ensemble_intervals.iter().enumerate() {
            if !(lo >= 0.0 && lo < hi) {
                return cfg(format!("interval {k} [{lo}, {hi}) is empty or negative"));
            }
            if lo < prev {
                return cfg(format!("interval {k} [{lo}, {hi}) overlaps or precedes the previous interval ending at {prev}"));
            }
            prev = hi;
        }
        if prev > self.cutoff {
            return cfg(format!("last interval ends at {prev} Å, beyond the {} Å cutoff", self.cutoff));
        }
        Ok(())
    }

    /// Edges at or beyond this distance keep their H0 blocks.
    pub fn correction_limit(&self) -> f64 {
        self.ensemble_intervals.last().map(|i| i[1]).unwrap_or(0.0)
    }

    fn spec(&self) -> IrrepSpec {
        self.feature_spec.normalized()
    }
}

/// Everything the network reads from one structure, precomputed once.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub graph: NeighborGraph,
    pub species: Vec<usize>,
    pub idx_i: Arc<Vec<usize>>,
    pub idx_j: Arc<Vec<usize>>,
    pub conj: Vec<usize>,
    /// Distance shared by an edge and its conjugate.
    pub sym_dist: Vec<f64>,
    pub sh: Mat,
    pub rbf: Mat,
    pub edge_h0: Mat,
    pub node_h0: Mat,
    pub h0_padded: Mat,
    pub mask: Mat,
    pub onehot: Mat,
}

/// Smooth polynomial envelope, 1 at the origin and C² zero at `cutoff`.
pub fn envelope(d: f64, cutoff: f64) -> f64 {
    let u = d / cutoff;
    if u >= 1.0 {
        0.0
    } else {
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Gaussians with centers uniform on `[0, cutoff]` and width equal to the spacing.
pub fn radial_basis(d: f64, cutoff: f64, n: usize) -> Vec<f64> {
    let step = if n > 1 { cutoff / (n - 1) as f64 } else { cutoff };
    let env = envelope(d, cutoff);
    (0..n)
        .map(|k| {
            let t = (d - k as f64 * step) / step;
            (-0.5 * t * t).exp() * env
        })
        .collect()
}

impl GraphInput {
    pub fn new(
        config: &ModelConfig,
        layout: &BasisLayout,
        structure: &CrystalStructure,
        h0: &BlockSparseHamiltonian,
    ) -> Result<Self> {
        let graph = build_neighbor_graph(structure, config.cutoff)?;
        let species = structure
            .species
            .iter()
            .map(|s| layout.element_index(s))
            .collect::<Result<Vec<_>>>()?;
        let ne = graph.len();
        let n = structure.num_atoms();
        let p2 = layout.dim * layout.dim;
        let nsh = (config.sh_lmax + 1) * (config.sh_lmax + 1);
        let bdim = layout.block_spec.dim();
        let conj = graph.conjugate_indices();
        let mut out = GraphInput {
            species: species.clone(),
            idx_i: Arc::new(graph.edges.iter().map(|e| e.i).collect()),
            idx_j: Arc::new(graph.edges.iter().map(|e| e.j).collect()),
            sym_dist: (0..ne).map(|e| graph.edges[e].distance.min(graph.edges[conj[e]].distance)).collect(),
            conj,
            sh: Mat::zeros(ne, nsh),
            rbf: Mat::zeros(ne, config.gaussian_basis),
            edge_h0: Mat::zeros(ne, bdim),
            node_h0: Mat::zeros(n, bdim),
            h0_padded: Mat::zeros(ne, p2),
            mask: Mat::zeros(ne, p2),
            onehot: Mat::from_fn(n, layout.elements.len(), |a, e| if species[a] == e { 1.0 } else { 0.0 }),
            graph,
        };
        for (r, e) in out.graph.edges.iter().enumerate() {
            let key = e.key();
            let blk = h0.block(&key, SpinRegion::UpUp).ok_or_else(|| {
                Error::Structural(format!("H0 has no block for graph edge (i={}, j={}, R={:?})", e.i, e.j, e.r))
            })?;
            let (si, sj) = (species[e.i], species[e.j]);
            let (ni, nj) = (layout.orbital_map[si].len(), layout.orbital_map[sj].len());
            if (blk.nrows(), blk.ncols()) != (ni, nj) {
                return Err(Error::Structural(format!(
                    "H0 block for edge (i={}, j={}) is {}x{}, basis expects {ni}x{nj}",
                    e.i,
                    e.j,
                    blk.nrows(),
                    blk.ncols()
                )));
            }
            let padded = layout.pad(si, sj, &blk.map(|z| z.re));
            let ch = layout.decompose(&padded);
            for (c, v) in ch.iter().enumerate() {
                out.edge_h0[(r, c)] = *v;
            }
            if key.is_onsite() {
                for (c, v) in ch.iter().enumerate() {
                    out.node_h0[(e.i, c)] = *v;
                }
            }
            for (c, (v, m)) in padded.iter().zip(layout.mask(si, sj)).enumerate() {
                out.h0_padded[(r, c)] = *v;
                out.mask[(r, c)] = m;
            }
            for (c, v) in sph_harm_upto(config.sh_lmax, &e.displacement).into_iter().enumerate() {
                out.sh[(r, c)] = v;
            }
            for (c, v) in radial_basis(e.distance, config.cutoff, config.gaussian_basis).into_iter().enumerate() {
                out.rbf[(r, c)] = v;
            }
        }
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.species.len()
    }

    pub fn num_edges(&self) -> usize {
        self.graph.len()
    }
}

struct Ffn {
    norm: EqNorm,
    lin1: EquivLinear,
    gate: Gate,
    lin2: EquivLinear,
}

impl Ffn {
    fn new(name: &str, spec: &IrrepSpec, params: &mut Parameters, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gate = Gate::new(spec);
        Ok(Ffn {
            norm: EqNorm::new(&format!("{name}.norm"), spec, params),
            lin1: EquivLinear::new(&format!("{name}.lin1"), spec, &gate.in_spec, true, params, rng)?,
            lin2: EquivLinear::new(&format!("{name}.lin2"), spec, spec, true, params, rng)?,
            gate,
        })
    }

    fn residual(&self, t: &mut Tape, x: Var, pv: &[Var]) -> Result<Var> {
        let n = self.norm.apply(t, x, pv);
        let h = self.lin1.apply(t, n, pv)?;
        let g = self.gate.apply(t, h);
        let o = self.lin2.apply(t, g, pv)?;
        Ok(t.add(x, o))
    }
}

struct Block {
    ffn_x: Ffn,
    ffn_e: Ffn,
    attn_w1: usize,
    attn_b1: usize,
    attn_w2: usize,
    attn_b2: usize,
    tp: ShTensorProduct,
    tp_radial: usize,
    lin_value: EquivLinear,
    lin_node: EquivLinear,
    lin_edge: EquivLinear,
    tracegrad: Option<TraceGrad>,
}

struct SubNet {
    spec: IrrepSpec,
    scalars: (usize, usize),
    embed_table: Option<usize>,
    embed_node: EquivLinear,
    embed_edge: EquivLinear,
    blocks: Vec<Block>,
    decoder: EquivLinear,
    trace_w: Option<usize>,
    trace_b: Option<usize>,
}

/// Output of one sub-model for the edges of its interval.
pub struct MemberOutput {
    pub member: usize,
    /// Graph edge indices, one per row.
    pub edges: Vec<usize>,
    /// Padded real spin-up blocks, row-major.
    pub blocks: Var,
    pub traces: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct Prediction {
    pub corrections: EdgeCorrections,
    pub traces: BTreeMap<EdgeKey, f64>,
    /// Sub-model responsible for each corrected edge.
    pub owner: BTreeMap<EdgeKey, usize>,
}

/// Loss value and its gradient with respect to the predicted quantities.
#[derive(Clone, Debug, Default)]
pub struct LossGrad {
    pub value: f64,
    pub corrections: BTreeMap<EdgeKey, Mat>,
    pub traces: BTreeMap<EdgeKey, f64>,
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let m = t.matmul(x, w);
    t.add_row(m, b)
}

/// `out[r] = ½ (x[r] + x[partner[r]] permuted by perm)`.
fn pair_symmetrize(t: &mut Tape, x: Var, partner: Arc<Vec<usize>>, perm: Arc<Vec<usize>>) -> Var {
    let xv = t.value(x);
    let out = Mat::from_fn(xv.nrows(), xv.ncols(), |r, c| 0.5 * (xv[(r, c)] + xv[(partner[r], perm[c])]));
    t.custom(
        out,
        &[x],
        Box::new(move |_, g, _| {
            let mut gx = g * 0.5;
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    gx[(partner[r], perm[c])] += 0.5 * g[(r, c)];
                }
            }
            vec![Some(gx)]
        }),
    )
}

impl SubNet {
    fn new(
        name: &str,
        config: &ModelConfig,
        layout: &BasisLayout,
        params: &mut Parameters,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let spec = config.spec();
        let k0 = spec.find(Irrep::new(0, Parity::Even)).expect("validated");
        let scalars = (spec.offset(k0), spec.entries()[k0].mul);
        let g = config.gaussian_basis;
        let scalar = |n: usize| IrrepSpec::from_pairs(&[(n, Irrep::new(0, Parity::Even))]).unwrap();
        let sh_spec = IrrepSpec::from_pairs(&(0..=config.sh_lmax).map(|l| (1, Irrep::harmonic(l))).collect::<Vec<_>>())?;
        let (embed_table, node_in, edge_in) = if config.element_embedding {
            let n_el = layout.elements.len();
            let table = params.add(format!("{name}.embed.table"), n_el, ELEMENT_EMBEDDING_DIM, Init::FanIn(1), rng);
            let node = scalar(ELEMENT_EMBEDDING_DIM);
            let edge = concat_specs(&[&scalar(2 * ELEMENT_EMBEDDING_DIM), &sh_spec, &scalar(g)]);
            (Some(table), node, edge)
        } else {
            let b = &layout.block_spec;
            (None, b.clone(), concat_specs(&[b, &sh_spec, &scalar(g)]))
        };
        let embed_node = EquivLinear::lenient(&format!("{name}.embed.node"), &node_in, &spec, params, rng)?;
        let embed_edge = EquivLinear::lenient(&format!("{name}.embed.edge"), &edge_in, &spec, params, rng)?;
        let mut blocks = Vec::new();
        for b in 0..config.n_blocks {
            let p = format!("{name}.block{b}");
            let inv = 3 * scalars.1 + g;
            let tp = ShTensorProduct::new(&spec, config.sh_lmax, &spec)?;
            let attn_w1 = params.add(format!("{p}.attn.w1"), inv, config.attention_hidden, Init::FanIn(inv), rng);
            let attn_b1 = params.add(format!("{p}.attn.b1"), 1, config.attention_hidden, Init::Zeros, rng);
            let attn_w2 = params.add(format!("{p}.attn.w2"), config.attention_hidden, config.n_heads, Init::FanIn(config.attention_hidden), rng);
            let attn_b2 = params.add(format!("{p}.attn.b2"), 1, config.n_heads, Init::Zeros, rng);
            let tp_radial = params.add(format!("{p}.tp.radial"), g, tp.num_weights, Init::FanIn(g), rng);
            let value_in = concat_specs(&[&spec, &tp.out_spec, &spec]);
            blocks.push(Block {
                ffn_x: Ffn::new(&format!("{p}.ffn_x"), &spec, params, rng)?,
                ffn_e: Ffn::new(&format!("{p}.ffn_e"), &spec, params, rng)?,
                attn_w1,
                attn_b1,
                attn_w2,
                attn_b2,
                lin_value: EquivLinear::new(&format!("{p}.value"), &value_in, &spec, true, params, rng)?,
                lin_node: EquivLinear::new(&format!("{p}.node_out"), &spec, &spec, true, params, rng)?,
                lin_edge: EquivLinear::new(&format!("{p}.edge_out"), &concat_specs(&[&spec, &spec]), &spec, true, params, rng)?,
                tracegrad: config
                    .tracegrad
                    .then(|| TraceGrad::new(&format!("{p}.tracegrad"), &spec, config.invariant_dim, params, rng)),
                tp,
                tp_radial,
            });
        }
        let start = params.len();
        let decoder = EquivLinear::new(&format!("{name}.decoder"), &spec, &layout.block_spec, true, params, rng)?;
        // corrections start at zero
        params.values[start..].fill(0.0);
        let (trace_w, trace_b) = if config.tracegrad {
            let d = config.invariant_dim;
            (
                Some(params.add(format!("{name}.trace.w"), d, 1, Init::FanIn(d), rng)),
                Some(params.add(format!("{name}.trace.b"), 1, 1, Init::Zeros, rng)),
            )
        } else {
            (None, None)
        };
        Ok(SubNet {
            spec,
            scalars,
            embed_table,
            embed_node,
            embed_edge,
            blocks,
            decoder,
            trace_w,
            trace_b,
        })
    }

    fn embed(&self, t: &mut Tape, inp: &GraphInput, pv: &[Var]) -> Result<(Var, Var)> {
        let sh = t.constant(inp.sh.clone());
        let rbf = t.constant(inp.rbf.clone());
        let (node, edge_parts) = match self.embed_table {
            Some(table) => {
                let oh = t.constant(inp.onehot.clone());
                let node = t.matmul(oh, pv[table]);
                let ei = t.gather_rows(node, inp.idx_i.clone());
                let ej = t.gather_rows(node, inp.idx_j.clone());
                (node, vec![ei, ej, sh, rbf])
            }
            None => {
                let node = t.constant(inp.node_h0.clone());
                let edge = t.constant(inp.edge_h0.clone());
                (node, vec![edge, sh, rbf])
            }
        };
        let x = self.embed_node.apply(t, node, pv)?;
        let e_in = t.concat_cols(&edge_parts);
        let e = self.embed_edge.apply(t, e_in, pv)?;
        Ok((x, e))
    }

    fn forward(
        &self,
        t: &mut Tape,
        inp: &GraphInput,
        pv: &[Var],
        layout: &BasisLayout,
        sel: &[usize],
        config: &ModelConfig,
        attention: &mut Vec<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let n = inp.num_nodes();
        let (mut x, mut e) = self.embed(t, inp, pv)?;
        let sh = t.constant(inp.sh.clone());
        let rbf = t.constant(inp.rbf.clone());
        let mut zs = Vec::new();
        for b in &self.blocks {
            x = b.ffn_x.residual(t, x, pv)?;
            e = b.ffn_e.residual(t, e, pv)?;

            let sx = t.slice_cols(x, self.scalars.0, self.scalars.1);
            let sxi = t.gather_rows(sx, inp.idx_i.clone());
            let sxj = t.gather_rows(sx, inp.idx_j.clone());
            let se = t.slice_cols(e, self.scalars.0, self.scalars.1);
            let inv = t.concat_cols(&[sxi, sxj, se, rbf]);
            let h = linear(t, inv, pv[b.attn_w1], pv[b.attn_b1]);
            let h = t.silu(h);
            let logits = linear(t, h, pv[b.attn_w2], pv[b.attn_b2]);
            let alpha = t.segment_softmax(logits, inp.idx_i.clone(), n);
            attention.push(alpha);

            let xi = t.gather_rows(x, inp.idx_i.clone());
            let xj = t.gather_rows(x, inp.idx_j.clone());
            let w = t.matmul(rbf, pv[b.tp_radial]);
            let tp = b.tp.apply(t, xj, sh, w);
            let vin = t.concat_cols(&[xi, tp, e]);
            let v = b.lin_value.apply(t, vin, pv)?;

            let va = head_scale(t, v, alpha, &self.spec);
            let msg = t.scatter_add_rows(va, inp.idx_i.clone(), n);
            let dx = b.lin_node.apply(t, msg, pv)?;
            x = t.add(x, dx);

            let ea = head_scale(t, e, alpha, &self.spec);
            let ein = t.concat_cols(&[ea, va]);
            let de = b.lin_edge.apply(t, ein, pv)?;
            e = t.add(e, de);

            if let Some(tg) = &b.tracegrad {
                zs.push(tg.z(t, e, pv));
                e = tg.deliver(t, e, pv);
            }
        }

        let pos: HashMap<usize, usize> = sel.iter().enumerate().map(|(r, &ei)| (ei, r)).collect();
        let partner = sel
            .iter()
            .map(|&ei| {
                pos.get(&inp.conj[ei]).copied().ok_or_else(|| {
                    Error::Structural(format!("conjugate of edge {ei} falls outside its interval"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sel_arc = Arc::new(sel.to_vec());
        let es = t.gather_rows(e, sel_arc.clone());
        let y = self.decoder.apply(t, es, pv)?;
        let dec = t.constant(layout.decode.clone());
        let blk = t.matmul(y, dec);
        let blk = pair_symmetrize(t, blk, Arc::new(partner), Arc::new(layout.transpose_perm()));
        let mask = t.constant(Mat::from_fn(sel.len(), inp.mask.ncols(), |r, c| inp.mask[(sel[r], c)]));
        let blk = t.mul(blk, mask);

        let traces = match (self.trace_w, self.trace_b) {
            (Some(w), Some(bias)) if !zs.is_empty() => {
                let mut acc = zs[0];
                for z in &zs[1..] {
                    acc = t.add(acc, *z);
                }
                let mean = t.scale(acc, 1.0 / config.n_blocks as f64);
                let zsel = t.gather_rows(mean, sel_arc);
                let lin = linear(t, zsel, pv[w], pv[bias]);
                Some(t.softplus(lin))
            }
            _ => None,
        };
        Ok((blk, traces))
    }
}

/// Distance-interval ensemble of sub-models sharing one flat parameter vector.
pub struct Model {
    pub config: ModelConfig,
    pub basis: OrbitalBasis,
    pub seed: u64,
    pub layout: BasisLayout,
    pub params: Parameters,
    members: Vec<SubNet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    basis: OrbitalBasis,
    seed: u64,
    registry: Vec<ParamEntry>,
    values: Vec<f64>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Model {
    pub fn new(config: ModelConfig, basis: OrbitalBasis, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = BasisLayout::new(&basis)?;
        let mut params = Parameters::default();
        let mut members = Vec::new();
        for m in 0..config.ensemble_intervals.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            members.push(SubNet::new(&format!("m{m}"), &config, &layout, &mut params, &mut rng)?);
        }
        params.validate()?;
        Ok(Model {
            config,
            basis,
            seed,
            layout,
            params,
            members,
        })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn input(&self, structure: &CrystalStructure, h0: &BlockSparseHamiltonian) -> Result<GraphInput> {
        GraphInput::new(&self.config, &self.layout, structure, h0)
    }

    /// Graph edges claimed by each sub-model.
    pub fn assignment(&self, input: &GraphInput) -> Vec<Vec<usize>> {
        self.config
            .ensemble_intervals
            .iter()
            .map(|&[lo, hi]| (0..input.num_edges()).filter(|&e| input.sym_dist[e] >= lo && input.sym_dist[e] < hi).collect())
            .collect()
    }

    /// Node and edge embeddings of one sub-model.
    pub fn embed(&self, input: &GraphInput, member: usize) -> Result<(Mat, Mat)> {
        let mut t = Tape::new();
        let pv = self.constants(&mut t);
        let (x, e) = self.members[member].embed(&mut t, input, &pv)?;
        Ok((t.value(x).clone(), t.value(e).clone()))
    }

    /// Attention weights `[edges x heads]` of every block of one sub-model.
    pub fn attention(&self, input: &GraphInput, member: usize) -> Result<Vec<Mat>> {
        let mut t = Tape::new();
        let pv = self.constants(&mut t);
        let sel: Vec<usize> = (0..input.num_edges()).collect();
        let mut alphas = Vec::new();
        self.members[member].forward(&mut t, input, &pv, &self.layout, &sel, &self.config, &mut alphas)?;
        Ok(alphas.into_iter().map(|a| t.value(a).clone()).collect())
    }

    fn constants(&self, t: &mut Tape) -> Vec<Var> {
        self.params
            .registry
            .iter()
            .enumerate()
            .map(|(i, e)| t.constant(Mat::from_row_slice(e.rows, e.cols, self.params.slice(i))))
            .collect()
    }

    pub fn forward(&self, t: &mut Tape, input: &GraphInput, pv: &[Var], enabled: &[bool]) -> Result<Vec<MemberOutput>> {
        let mut out = Vec::new();
        for (m, sel) in self.assignment(input).into_iter().enumerate() {
            if sel.is_empty() || !enabled.get(m).copied().unwrap_or(true) {
                continue;
            }
            let (blocks, traces) = self.members[m].forward(t, input, pv, &self.layout, &sel, &self.config, &mut Vec::new())?;
            out.push(MemberOutput { member: m, edges: sel, blocks, traces });
        }
        Ok(out)
    }

    fn collect(&self, t: &Tape, input: &GraphInput, outs: &[MemberOutput]) -> Prediction {
        let mut pred = Prediction::default();
        for o in outs {
            let bv = t.value(o.blocks);
            for (r, &e) in o.edges.iter().enumerate() {
                let edge = &input.graph.edges[e];
                let (si, sj) = (input.species[edge.i], input.species[edge.j]);
                let mut row: Vec<f64> = bv.row(r).iter().copied().collect();
                if self.config.direct_target {
                    for (v, h) in row.iter_mut().zip(input.h0_padded.row(e).iter()) {
                        *v -= h;
                    }
                }
                let key = edge.key();
                pred.corrections.insert(key, self.layout.unpad(si, sj, &row));
                pred.owner.insert(key, o.member);
                if let Some(tr) = o.traces {
                    pred.traces.insert(key, t.value(tr)[r]);
                }
            }
        }
        pred
    }

    pub fn predict(&self, input: &GraphInput) -> Result<Prediction> {
        self.predict_enabled(input, &[])
    }

    /// Prediction with some sub-models switched off (`false` entries).
    pub fn predict_enabled(&self, input: &GraphInput, enabled: &[bool]) -> Result<Prediction> {
        let mut t = Tape::new();
        let pv = self.constants(&mut t);
        let outs = self.forward(&mut t, input, &pv, enabled)?;
        Ok(self.collect(&t, input, &outs))
    }

    /// Loss value and its gradient with respect to every parameter.
    pub fn gradient(
        &self,
        input: &GraphInput,
        loss: impl FnOnce(&Prediction) -> Result<LossGrad>,
    ) -> Result<(Prediction, LossGrad, Vec<f64>)> {
        let mut t = Tape::new();
        let pv = self.params.bind(&mut t);
        let outs = self.forward(&mut t, input, &pv, &[])?;
        let pred = self.collect(&t, input, &outs);
        let lg = loss(&pred)?;
        let mut terms = Vec::new();
        for o in &outs {
            let shape = t.value(o.blocks).shape();
            let mut g = Mat::zeros(shape.0, shape.1);
            let mut gt = Mat::zeros(o.edges.len(), 1);
            for (r, &e) in o.edges.iter().enumerate() {
                let edge = &input.graph.edges[e];
                let key = edge.key();
                if let Some(d) = lg.corrections.get(&key) {
                    let padded = self.layout.pad(input.species[edge.i], input.species[edge.j], d);
                    for (c, v) in padded.into_iter().enumerate() {
                        g[(r, c)] = v;
                    }
                }
                gt[r] = lg.traces.get(&key).copied().unwrap_or(0.0);
            }
            let gv = t.constant(g);
            let p = t.mul(o.blocks, gv);
            terms.push(t.sum(p));
            if let Some(tr) = o.traces {
                let gv = t.constant(gt);
                let p = t.mul(tr, gv);
                terms.push(t.sum(p));
            }
        }
        let mut grad = vec![0.0; self.params.len()];
        if let Some(&first) = terms.first() {
            let mut s = first;
            for &x in &terms[1..] {
                s = t.add(s, x);
            }
            let grads = t.backward(s);
            grad = t.parameter_gradient(&grads, self.params.len());
        }
        Ok((pred, lg, grad))
    }

    pub fn to_json_value(&self, meta: serde_json::Value) -> serde_json::Value {
        serde_json::to_value(CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            basis: self.basis.clone(),
            seed: self.seed,
            registry: self.params.registry.clone(),
            values: self.params.values.clone(),
            meta,
        })
        .expect("checkpoint serializes")
    }

    /// Rebuild from a checkpoint; returns the stored metadata too.
    pub fn from_json_value(value: serde_json::Value) -> Result<(Self, serde_json::Value)> {
        let fmt = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if fmt != CHECKPOINT_FORMAT {
            return Err(Error::parse("/format", format!("expected {CHECKPOINT_FORMAT:?}, found {fmt:?}")));
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::parse("", e.to_string()))?;
        let mut model = Model::new(file.config, file.basis, file.seed)?;
        if model.params.registry != file.registry {
            return Err(Error::parse("/registry", "parameter registry does not match the configured architecture"));
        }
        if file.values.len() != model.params.len() {
            return Err(Error::parse(
                "/values",
                format!("expected {} values, found {}", model.params.len(), file.values.len()),
            ));
        }
        model.params.values = file.values;
        Ok((model, file.meta))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(&self.to_json_value(meta)).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse("", e.to_string()))?;
        Self::from_json_value(value)
    }
}
