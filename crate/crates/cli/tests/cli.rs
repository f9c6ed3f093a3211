use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hamcorr::checks::suite_model;
use hamcorr::datagen::GeneratorConfig;
use hamcorr::trainkit::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hamcorr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "generator": GeneratorConfig {
            atoms_min: 1,
            atoms_max: 2,
            graph_cutoff: 4.5,
            hopping_cutoff: 4.5,
            correction_cutoff: 4.0,
            ..Default::default()
        },
        "model": suite_model(),
        "train": TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_epochs: 1,
            band_points: 5,
            ..Default::default()
        },
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = run(&["gen", "--config", s(cfg), "--out", s(&out), "--n-train", "3", "--n-val", "2", "--n-test", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["check", "--no-such-flag"]).status.code(), Some(2));
    let o = run(&["eval", "--json"]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one_and_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--h0", "--data", s(&dir.path().join("missing")), "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "io");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = run(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("x")), "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "parse");
}

#[test]
fn gen_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = gen(dir.path(), &cfg, "a");
    let b = gen(dir.path(), &cfg, "b");
    for f in ["manifest.json", "samples/train_0000/ht.json", "samples/test_0001/structure.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&c), "--n-train", "3", "--n-val", "2", "--n-test", "2", "--seed", "2"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(c.join("manifest.json")).unwrap());
    assert_eq!(read_json(&a.join("manifest.json"))["generator"]["seed"], 1);
}

#[test]
fn eval_of_h0_reproduces_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let out = dir.path().join("eval");
    let o = run(&["eval", "--h0", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["table"], r["baseline"]);
    assert_eq!(r["ghost_flags"], r["ghost_flags_h0"]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("region,part,gauge_mae_meV,mu_eV"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Overall"));
}

#[test]
fn train_eval_bands_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run_dir), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    for f in ["best.json", "last.json", "summary.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let steps: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .collect();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().all(|v| v["lr"].is_f64() && v["mu"].is_array() && v["loss"]["total"].is_f64()));

    let ev = dir.path().join("eval");
    let ckpt = run_dir.join("best.json");
    let o = run(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ev.join("report.txt").exists());

    // prediction file equal to the ground truth: gt and pred curves coincide
    let bands_dir = dir.path().join("bands");
    let ht = data.join("samples/test_0000/ht.json");
    let o = run(&[
        "bands", "--data", s(&data), "--sample", "test_0000", "--pred", s(&ht), "--points", "6", "--out", s(&bands_dir), "--gnuplot",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(bands_dir.join("bands.csv")).unwrap();
    let rows = |src: &str| -> Vec<String> {
        csv.lines()
            .filter(|l| l.ends_with(&format!(",{src}")))
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert!(!rows("gt").is_empty());
    assert_eq!(rows("gt"), rows("pred"));
    assert!(bands_dir.join("bands.gp").exists());

    let o = run(&[
        "bands", "--data", s(&data), "--sample", "test_0001", "--checkpoint", s(&ckpt), "--kpath", "0,0,0;0.5,0,0", "--points", "4",
        "--out", s(&dir.path().join("bands2")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["bands", "--data", s(&data), "--sample", "nope", "--out", s(&bands_dir)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_single_variant_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let out = dir.path().join("ablate");
    let o = run(&["ablate", "--data", s(&data), "--config", s(&cfg), "--variant", "loss_pq", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("Full Method") && table.contains("Ablation@Loss-PQ"));
    assert!(out.join("loss_pq/train_log.jsonl").exists());
    let o = run(&["ablate", "--data", s(&data), "--variant", "bogus", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn quick_check_passes() {
    let o = run(&["check", "--quick", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.as_array().unwrap().iter().all(|r| r["passed"] == true));
}
