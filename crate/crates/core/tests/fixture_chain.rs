//! Hand-written files for a one-band chain must load into the same model as
//! the built-in constructor.

use std::path::Path;

use hamcorr::datagen::{load_sample, one_band_chain, SamplePaths};
use hamcorr::hamiltonian::DenseKMatrix;
use hamcorr::spectra::{max_abs, solve_gep};
use nalgebra::Vector3;

const EPS: f64 = -0.3;
const T: f64 = -1.1;

fn fixture_paths() -> SamplePaths {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/chain");
    SamplePaths {
        structure: dir.join("structure.json"),
        h0: dir.join("h.json"),
        ht: dir.join("h.json"),
        s: dir.join("s.json"),
    }
}

#[test]
fn fixture_matches_constructed_chain() {
    let loaded = load_sample(&fixture_paths(), EPS).unwrap();
    let built = one_band_chain(EPS, T, 2.5).unwrap();
    assert_eq!(loaded.structure.lattice, built.structure.lattice);
    for x in [0.0, 0.1, 0.25, 0.37, 0.5] {
        let k = Vector3::new(x, 0.0, 0.0);
        assert!(max_abs(&(loaded.ht.bloch_matrix(&k) - built.ht.bloch_matrix(&k))) < 1e-15);
        assert!(max_abs(&(loaded.s.bloch_matrix(&k) - built.s.bloch_matrix(&k))) < 1e-15);
        let sol = solve_gep(&DenseKMatrix::assemble(&loaded.ht, &loaded.s, &k).unwrap()).unwrap();
        let want = EPS + 2.0 * T * (2.0 * std::f64::consts::PI * x).cos();
        assert_eq!(sol.eigenvalues.len(), 2);
        for e in &sol.eigenvalues {
            assert!((e - want).abs() < 1e-12, "k={x}: {e} vs {want}");
        }
    }
}

#[test]
fn fixture_survives_a_save_load_round_trip() {
    let loaded = load_sample(&fixture_paths(), EPS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = loaded.save(dir.path()).unwrap();
    let again = load_sample(&paths, EPS).unwrap();
    assert_eq!(again.ht.to_json_value(false), loaded.ht.to_json_value(false));
    assert_eq!(again.s.to_json_value(true), loaded.s.to_json_value(true));
    assert_eq!(again.structure.to_json_value(), loaded.structure.to_json_value());
}
