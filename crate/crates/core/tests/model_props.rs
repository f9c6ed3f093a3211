use hamcorr::checks::jitter;
use hamcorr::datagen::{build_hamiltonians, random_structure, sample_rng, GeneratorConfig, Material};
use hamcorr::hamiltonian::{orbital_rotation, BlockSparseHamiltonian};
use hamcorr::irreps::RotationParity;
use hamcorr::lattice::{CrystalStructure, EdgeKey};
use hamcorr::model::equiv::transform_rows;
use hamcorr::model::{Model, ModelConfig, Prediction};
use hamcorr::Error;
use nalgebra::{DMatrix, Matrix3, Vector3};

fn gen_cfg() -> GeneratorConfig {
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

fn tiny(intervals: &[[f64; 2]]) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        feature_spec: "8x0e+4x1o+4x1e+2x2e+2x2o+1x3e+1x3o+1x4e".parse().unwrap(),
        n_heads: 2,
        gaussian_basis: 8,
        invariant_dim: 12,
        cutoff: 4.0,
        ensemble_intervals: intervals.to_vec(),
        sh_lmax: 2,
        attention_hidden: 8,
        ..Default::default()
    }
}

const INTERVALS: [[f64; 2]; 3] = [[0.0, 1.0], [1.0, 2.5], [2.5, 4.0]];

struct Fixture {
    cfg: GeneratorConfig,
    mat: Material,
    st: CrystalStructure,
    h0: BlockSparseHamiltonian,
}

fn fixture(index: u64) -> Fixture {
    let cfg = gen_cfg();
    let mat = Material::generate(&cfg).unwrap();
    let st = random_structure(&cfg, &mut sample_rng(cfg.seed, index)).unwrap();
    let (h0, _, _) = build_hamiltonians(&cfg, &mat, &st).unwrap();
    Fixture { cfg, mat, st, h0 }
}

fn built(intervals: &[[f64; 2]], f: &Fixture, seed: u64) -> Model {
    let mut m = Model::new(tiny(intervals), f.mat.basis.clone(), seed).unwrap();
    jitter(&mut m, seed + 100, 0.05);
    m
}

fn h0_of(f: &Fixture, st: &CrystalStructure) -> BlockSparseHamiltonian {
    build_hamiltonians(&f.cfg, &f.mat, st).unwrap().0
}

fn predict(model: &Model, st: &CrystalStructure, h0: &BlockSparseHamiltonian) -> Prediction {
    model.predict(&model.input(st, h0).unwrap()).unwrap()
}

/// Structure transformed by `rp` plus the per-atom image shift from re-wrapping.
fn transformed(st: &CrystalStructure, rp: &RotationParity) -> (CrystalStructure, Vec<[i32; 3]>) {
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

fn mapped_key(k: &EdgeKey, inv: bool, shift: &[[i32; 3]]) -> EdgeKey {
    if inv {
        EdgeKey::new(k.i, k.j, [0, 1, 2].map(|c| -k.r[c] + shift[k.i][c] - shift[k.j][c]))
    } else {
        *k
    }
}

#[test]
fn end_to_end_rotation_and_inversion_equivariance() {
    let f = fixture(0);
    let model = built(&INTERVALS, &f, 1);
    let base = predict(&model, &f.st, &f.h0);
    assert!(!base.corrections.is_empty());
    for inv in [false, true] {
        let rp = RotationParity::from_uniforms([0.61, 0.27, 0.83], inv);
        let (st2, shift) = transformed(&f.st, &rp);
        let pred = predict(&model, &st2, &h0_of(&f, &st2));
        let d: Vec<DMatrix<f64>> = f
            .st
            .species
            .iter()
            .map(|e| orbital_rotation(&f.mat.basis, e, &rp).unwrap())
            .collect();
        let mut worst: f64 = 0.0;
        let mut worst_t: f64 = 0.0;
        for (k, b) in &base.corrections {
            let k2 = mapped_key(k, inv, &shift);
            let want = &d[k.i] * b * d[k.j].transpose();
            worst = worst.max((want - &pred.corrections[&k2]).amax());
            worst_t = worst_t.max((base.traces[k] - pred.traces[&k2]).abs());
        }
        assert!(worst < 1e-7, "blocks inv={inv}: {worst}");
        assert!(worst_t < 1e-9, "traces inv={inv}: {worst_t}");
    }
}

#[test]
fn embeddings_are_equivariant_and_deterministic() {
    let f = fixture(1);
    let model = built(&INTERVALS, &f, 1);
    let inp = model.input(&f.st, &f.h0).unwrap();
    let (x, e) = model.embed(&inp, 1).unwrap();
    let (x2, e2) = model.embed(&inp, 1).unwrap();
    assert_eq!(x, x2);
    assert_eq!(e, e2);
    let spec = model.config.feature_spec.normalized();
    let rp = RotationParity::from_uniforms([0.1, 0.9, 0.4], false);
    let (st2, _) = transformed(&f.st, &rp);
    let inp2 = model.input(&st2, &h0_of(&f, &st2)).unwrap();
    let (xr, er) = model.embed(&inp2, 1).unwrap();
    assert!((transform_rows(&x, &spec, &rp) - xr).amax() < 1e-9);
    assert!((transform_rows(&e, &spec, &rp) - er).amax() < 1e-9);
}

#[test]
fn permuting_atoms_permutes_blocks() {
    let f = fixture(2);
    let n = f.st.num_atoms();
    let sigma: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let mut st2 = f.st.clone();
    for i in 0..n {
        st2.species[sigma[i]] = f.st.species[i].clone();
        st2.frac_coords[sigma[i]] = f.st.frac_coords[i];
    }
    let model = built(&INTERVALS, &f, 1);
    let a = predict(&model, &f.st, &f.h0);
    let b = predict(&model, &st2, &h0_of(&f, &st2));
    assert_eq!(a.corrections.len(), b.corrections.len());
    for (k, m) in &a.corrections {
        let k2 = EdgeKey::new(sigma[k.i], sigma[k.j], k.r);
        assert!((m - &b.corrections[&k2]).amax() < 1e-10);
    }
}

#[test]
fn translation_invariance() {
    let f = fixture(3);
    let model = built(&INTERVALS, &f, 1);
    let a = predict(&model, &f.st, &f.h0);
    let t = Vector3::new(0.37, -0.21, 0.55);
    let mut st2 = f.st.clone();
    let mut shift = vec![[0i32; 3]; f.st.num_atoms()];
    for (i, fr) in f.st.frac_coords.iter().enumerate() {
        let moved = fr + t;
        st2.frac_coords[i] = CrystalStructure::wrap(moved);
        shift[i] = [0, 1, 2].map(|c| (moved[c] - st2.frac_coords[i][c]).round() as i32);
    }
    let b = predict(&model, &st2, &h0_of(&f, &st2));
    for (k, m) in &a.corrections {
        let r = [0, 1, 2].map(|c| k.r[c] + shift[k.j][c] - shift[k.i][c]);
        assert!((m - &b.corrections[&EdgeKey::new(k.i, k.j, r)]).amax() < 1e-8);
    }

    // exactly representable coordinates and shift: identical bits
    let lattice = Matrix3::new(3.0, 0.0, 0.0, 0.0, 3.5, 0.0, 0.0, 0.0, 4.0);
    let st = CrystalStructure::new(
        lattice,
        vec!["B".into(), "C".into()],
        vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.5, 0.25, 0.5)],
    )
    .unwrap();
    let mut moved = st.clone();
    for fr in moved.frac_coords.iter_mut() {
        *fr += Vector3::new(0.125, 0.25, 0.0625);
    }
    let a = predict(&model, &st, &h0_of(&f, &st));
    let b = predict(&model, &moved, &h0_of(&f, &moved));
    for (k, m) in &a.corrections {
        assert_eq!(m, &b.corrections[k]);
    }
}

#[test]
fn isolated_atom_attends_to_itself() {
    let f = fixture(0);
    let st = CrystalStructure::new(
        Matrix3::identity() * 12.0,
        vec!["C".into()],
        vec![Vector3::new(0.3, 0.3, 0.3)],
    )
    .unwrap();
    let model = built(&INTERVALS, &f, 1);
    let inp = model.input(&st, &h0_of(&f, &st)).unwrap();
    assert_eq!(inp.num_edges(), 1);
    for a in model.attention(&inp, 0).unwrap() {
        assert!(a.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn ensemble_membership_and_member_disabling() {
    let f = fixture(4);
    let model = built(&INTERVALS, &f, 1);
    let inp = model.input(&f.st, &f.h0).unwrap();
    let assign = model.assignment(&inp);
    let mut count = vec![0; inp.num_edges()];
    for (m, edges) in assign.iter().enumerate() {
        for &e in edges {
            count[e] += 1;
            let [lo, hi] = INTERVALS[m];
            assert!(inp.graph.edges[e].distance >= lo && inp.graph.edges[e].distance < hi);
        }
    }
    for (e, c) in count.iter().enumerate() {
        let expect = usize::from(inp.graph.edges[e].distance < model.config.correction_limit());
        assert_eq!(*c, expect);
    }
    let full = model.predict(&inp).unwrap();
    let partial = model.predict_enabled(&inp, &[true, true, false]).unwrap();
    for (k, m) in &full.corrections {
        if full.owner[k] == 2 {
            assert!(!partial.corrections.contains_key(k));
        } else {
            assert_eq!(m, &partial.corrections[k]);
        }
    }
    assert!(full.owner.values().any(|&o| o == 2));

    let single = built(&[[0.0, 4.0]], &f, 1);
    let p = single.predict(&single.input(&f.st, &f.h0).unwrap()).unwrap();
    assert!(p.owner.values().all(|&o| o == 0));
    assert_eq!(p.corrections.len(), count.iter().sum::<usize>());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let f = fixture(0);
    let model = built(&INTERVALS, &f, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    model.save(&path, serde_json::json!({"epoch": 3})).unwrap();
    let (back, meta) = Model::load(&path).unwrap();
    assert_eq!(meta["epoch"], 3);
    assert_eq!(back.params.values, model.params.values);
    assert_eq!(back.config, model.config);
    let a = predict(&model, &f.st, &f.h0);
    let b = predict(&back, &f.st, &f.h0);
    assert_eq!(a.corrections, b.corrections);
    assert_eq!(a.traces, b.traces);

    let mut v = model.to_json_value(serde_json::Value::Null);
    v["values"].as_array_mut().unwrap().pop();
    assert!(matches!(Model::from_json_value(v), Err(Error::Parse { .. })));
}

#[test]
fn configuration_errors() {
    let f = fixture(0);
    let overlapping = tiny(&[[0.0, 2.0], [1.5, 4.0]]);
    assert!(matches!(
        Model::new(overlapping, f.mat.basis.clone(), 1),
        Err(Error::Configuration(_))
    ));
    let beyond = tiny(&[[0.0, 5.0]]);
    assert!(matches!(Model::new(beyond, f.mat.basis.clone(), 1), Err(Error::Configuration(_))));
    let model = built(&INTERVALS, &f, 1);
    let mut st = f.st.clone();
    st.species[0] = "Q".into();
    assert!(matches!(model.input(&st, &f.h0), Err(Error::Configuration(_))));
}
