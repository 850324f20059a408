use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use spectral_adapter::adapters::{merge, AdapterBase, AdapterKind, AdapterSpec};
use spectral_adapter::io::{read_adapter, read_matrix, write_adapter, write_matrix, Manifest};
use spectral_adapter::rng::{gaussian_matrix, seeded};
use spectral_adapter::{ColumnSelect, Matrix};
use tempfile::tempdir;

fn spadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spadapt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn decompose_identity_and_round_trip() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    write_matrix(&d.join("eye"), &Matrix::identity(4)).unwrap();
    ok(d, &["decompose", "--input", "eye.json", "--out-dir", "eye_out"]);
    let s = read_matrix(&d.join("eye_out/decomposition/s")).unwrap();
    assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0, 1.0]);

    let w = gaussian_matrix(&mut seeded(1), 5, 7, 2.0);
    write_matrix(&d.join("w"), &w).unwrap();
    ok(d, &["decompose", "--input", "w", "--out-dir", "w_out"]);
    let base = AdapterBase::new(w.clone()).unwrap();
    let state = AdapterSpec::new(AdapterKind::SpectralA, 2).init(&base).unwrap();
    write_adapter(&d.join("zero"), &state, &base, 0).unwrap();
    ok(d, &["merge", "--base", "w_out/decomposition", "--adapter", "zero", "--out-dir", "m_out"]);
    let merged = read_matrix(&d.join("m_out/merged")).unwrap();
    assert!(merged.sub(&w).unwrap().frobenius_norm() <= 1e-9 * (1.0 + w.frobenius_norm()));
}

#[test]
fn decompose_records_wall_clock() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    write_matrix(&d.join("big"), &gaussian_matrix(&mut seeded(2), 512, 512, 1.0)).unwrap();
    ok(d, &["decompose", "--input", "big", "--out-dir", "o"]);
    let m = Manifest::read(&d.join("o/manifest.json")).unwrap();
    assert!(m.timings_ms["decomposition"] > 0.0);
    assert_eq!(m.command, "decompose");
    assert_eq!(m.outputs.len(), 7);
    let report = read_json(&d.join("o/report.json"));
    assert!(report["reconstruction_error"].as_f64().unwrap() < 1e-9 * 513.0);
}

#[test]
fn budget_table_values() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["budget", "--n", "1024", "--max-rank", "32"]);
    let csv = std::fs::read_to_string(d.join("out/budget.csv")).unwrap();
    assert!(csv.starts_with("kind,rank,params,scaling\n"));
    assert!(!csv.contains('\r'));
    for row in ["LoRA,1,2048,", "SpectralR,32,2048,", "LiDB,4,600,", "OFT,16,4096,"] {
        assert!(csv.lines().any(|l| l.starts_with(row)), "missing {row}");
    }
    let j = read_json(&d.join("out/budget.json"));
    let scaling: Vec<&str> = j["kinds"].as_array().unwrap().iter().map(|k| k["scaling"].as_str().unwrap()).collect();
    assert!(scaling.contains(&"2r² ∝ r") && scaling.contains(&"(n/r)² ∝ n/r"));
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    assert_eq!(spadapt(d, &["budget", "--nope"]).status.code(), Some(2));
    assert_eq!(spadapt(d, &["frobnicate"]).status.code(), Some(2));
    std::fs::write(d.join("junk.json"), "{\"rows\": 2}").unwrap();
    std::fs::write(d.join("junk.bin"), [0u8; 3]).unwrap();
    assert_eq!(spadapt(d, &["decompose", "--input", "junk"]).status.code(), Some(3));
    assert_eq!(spadapt(d, &["decompose", "--input", "absent"]).status.code(), Some(3));
    let out = spadapt(d, &["--tol", "1e-300", "gradcheck", "--kinds", "LoRA", "--instances", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(d.join("cfg.json"), r#"{"train": {"steps": "many"}, "toynet": {"hidden_dim": 0}}"#).unwrap();
    let out = spadapt(d, &["experiment", "subspace", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.steps") && err.contains("toynet."), "{err}");
}

#[test]
fn gradcheck_passes_for_all_kinds() {
    let dir = tempdir().unwrap();
    ok(dir.path(), &["gradcheck", "--instances", "3"]);
    let j = read_json(&dir.path().join("out/gradcheck.json"));
    assert_eq!(j["results"].as_array().unwrap().len(), 8);
}

#[test]
fn rankcap_writes_certificate() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["rankcap", "--kind", "lora", "--rank", "2", "--out-dir", "rc"]);
    let j = read_json(&d.join("rc/rankcap.json"));
    assert_eq!(j["capacity"], 2);
    assert_eq!(j["min_rank_achieved"], 6);
    let base = AdapterBase::new(read_matrix(&d.join("rc/base")).unwrap()).unwrap();
    let (header, cert) = read_adapter(&d.join("rc/certificate")).unwrap();
    header.check_base(&base).unwrap();
    let rank = spectral_adapter::linalg::numerical_rank(&merge(&base, &cert).unwrap(), None).unwrap();
    assert_eq!(rank, 6);
}

#[test]
fn experiments_emit_reports() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["experiment", "subspace", "--out-dir", "sub"]);
    let j = read_json(&d.join("sub/report.json"));
    assert!(j["out_of_plane_max"].is_number() && j["plane_angle"].is_number());

    std::fs::write(d.join("r0.json"), r#"{"schema_version": 1, "problem": {"r": 0}, "train": {"steps": 50}}"#).unwrap();
    ok(d, &["experiment", "rank-recovery", "--config", "r0.json", "--out-dir", "r0"]);
    let csv = std::fs::read_to_string(d.join("r0/losses.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 51);
    for r in &rows {
        assert_eq!(r[1], rows[0][1]);
        assert_eq!(r[2], rows[0][1]);
    }

    ok(d, &["experiment", "loss-compare", "--out-dir", "lc"]);
    let j = read_json(&d.join("lc/report.json"));
    let floor = j["lora_floor"].as_f64().unwrap();
    let runs = j["runs"].as_array().unwrap();
    let spectral = runs.iter().find(|r| r["label"] == "SpectralA_r2").unwrap();
    assert!(spectral["terminal_distance"].as_f64().unwrap() < floor);
    let header = std::fs::read_to_string(d.join("lc/losses.csv")).unwrap();
    assert!(header.starts_with("step,LoRA_r2,SpectralA_r2,SpectralR_r4,OFT_r2,SVDiff,full\n"));
}

fn fusion_fixture(d: &Path) {
    let w = gaussian_matrix(&mut seeded(3), 6, 8, 1.0);
    write_matrix(&d.join("base"), &w).unwrap();
    let base = AdapterBase::new(w).unwrap();
    for i in 0..2 {
        let spec = AdapterSpec::new(AdapterKind::SpectralA, 2).with_columns(ColumnSelect::range(2 * i, 2));
        let mut s = spec.init(&base).unwrap();
        s.perturb(&mut seeded(10 + i as u64), 0.3);
        write_adapter(&d.join(format!("c{i}")), &s, &base, 0).unwrap();
        write_matrix(&d.join(format!("x{i}")), &gaussian_matrix(&mut seeded(20 + i as u64), 8, 5, 1.0)).unwrap();
    }
    let plan = json!({
        "schema_version": 1,
        "base": "base.json",
        "entries": [{"adapter": "c0.json", "lambda": 1.0}, {"adapter": "c1.json", "lambda": 1.0}],
        "policy": "contiguous-top"
    });
    std::fs::write(d.join("plan.json"), plan.to_string()).unwrap();
}

#[test]
fn fuse_methods_and_reports() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fusion_fixture(d);
    ok(d, &["fuse", "--plan", "plan.json", "--probes", "x0,x1", "--out-dir", "sp"]);
    let j = read_json(&d.join("sp/report.json"));
    assert_eq!(j["overlaps"], json!([]));
    assert_eq!(j["deviations"].as_array().unwrap().len(), 2);
    ok(d, &["fuse", "--plan", "plan.json", "--method", "gradient", "--activations", "x0,x1", "--out-dir", "gf"]);
    let j = read_json(&d.join("gf/report.json"));
    assert!(j["objective"].as_f64().unwrap() <= j["fedavg_objective"].as_f64().unwrap());
    let out = spadapt(d, &["fuse", "--plan", "plan.json", "--method", "gradient"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn manifests_replay_bit_identically() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fusion_fixture(d);
    let x = gaussian_matrix(&mut seeded(4), 12, 8, 1.0);
    let y = gaussian_matrix(&mut seeded(5), 12, 6, 1.0);
    write_matrix(&d.join("x"), &x).unwrap();
    write_matrix(&d.join("y"), &y).unwrap();
    std::fs::write(
        d.join("train.json"),
        r#"{"optimizer": "adam-w", "learning_rate": 0.01, "steps": 200, "batch_size": 4, "adapter": {"kind": "LoRA", "rank": 2}}"#,
    )
    .unwrap();
    let runs: [&[&str]; 5] = [
        &["--seed", "7", "train", "--base", "base", "--inputs", "x", "--targets", "y", "--config", "train.json", "--out-dir", "t"],
        &["fuse", "--plan", "plan.json", "--method", "fedavg", "--out-dir", "f"],
        &["--seed", "3", "rankcap", "--kind", "SpectralA", "--rank", "1", "--out-dir", "rc"],
        &["decompose", "--input", "base", "--out-dir", "dc"],
        &["budget", "--n", "64", "--out-dir", "b"],
    ];
    for args in runs {
        ok(d, args);
        let out_dir = args[args.len() - 1];
        let stdout = ok(d, &["replay", "--manifest", &format!("{out_dir}/manifest.json")]);
        assert!(stdout.contains("identical"), "{stdout}");
        let a = Manifest::read(&d.join(out_dir).join("manifest.json")).unwrap();
        let b = Manifest::read(&d.join(out_dir).join("replay/manifest.json")).unwrap();
        assert_eq!(a.config, b.config);
        for o in &a.outputs {
            let x = std::fs::read(d.join(out_dir).join(&o.path)).unwrap();
            let y = std::fs::read(d.join(out_dir).join("replay").join(&o.path)).unwrap();
            assert_eq!(x, y, "{}", o.path);
        }
    }
    let m = Manifest::read(&d.join("t/manifest.json")).unwrap();
    assert_eq!(m.seed, 7);
    assert_eq!(m.config["config"]["adapter"]["seed"], 7);
    assert!(d.join("t/adapter.json").exists());
}

#[test]
fn bench_svd_csv() {
    let dir = tempdir().unwrap();
    ok(dir.path(), &["bench-svd", "--sizes", "16,32", "--repeats", "3"]);
    let csv = std::fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "size,t_median_ms,t_p90_ms,mem_bytes");
    assert_eq!(lines.len(), 3);
    let j = read_json(&dir.path().join("out/bench.json"));
    assert_eq!(j[0]["timings_ms"].as_array().unwrap().len(), 3);
    assert_eq!(
        spadapt(dir.path(), &["bench-svd", "--sizes", "5000", "--repeats", "1"]).status.code(),
        Some(3)
    );
}
