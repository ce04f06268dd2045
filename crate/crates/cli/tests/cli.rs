use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

fn somala(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_somala"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = somala(args);
    assert_eq!(code, 0, "somala {args:?} failed:\n{stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

fn assert_same_csvs(a: &Path, b: &Path) {
    let (fa, fb) = (csv_files(a), csv_files(b));
    assert!(!fa.is_empty());
    assert_eq!(
        fa.iter().map(|p| p.file_name()).collect::<Vec<_>>(),
        fb.iter().map(|p| p.file_name()).collect::<Vec<_>>()
    );
    for (x, y) in fa.iter().zip(&fb) {
        assert!(
            read(x) == read(y),
            "{} differs from {}",
            x.display(),
            y.display()
        );
    }
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

/// Small M2PL dataset shared by the fit tests.
fn m2pl_data(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("data");
    ok(&[
        "--seed",
        "11",
        "--out",
        s(&dir),
        "simulate",
        "--setting",
        "m2pl-k5",
        "--n-obs",
        "120",
    ]);
    dir
}

#[test]
fn simulate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&[
            "--seed",
            seed,
            "--out",
            s(dir),
            "simulate",
            "--setting",
            "m2pl-k5",
            "--n-obs",
            "50",
        ]);
    }
    for f in [
        "responses.csv",
        "q_matrix.csv",
        "truth.json",
        "latent.csv",
        "setting.json",
    ] {
        assert!(read(a.join(f)) == read(b.join(f)), "{f}");
    }
    assert!(read(a.join("responses.csv")) != read(c.join("responses.csv")));
    let m = json(a.join("manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn simulate_default_multilevel_size() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("ml");
    ok(&[
        "--seed",
        "7",
        "--out",
        s(&dir),
        "simulate",
        "--setting",
        "multilevel-k5",
    ]);
    let mut rdr = csv::Reader::from_path(dir.join("data.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 2 + 5);
    let mut per_group = std::collections::BTreeMap::<String, usize>::new();
    for rec in rdr.records() {
        *per_group.entry(rec.unwrap()[0].to_string()).or_default() += 1;
    }
    assert_eq!(per_group.len(), 10_000);
    assert!(per_group.values().all(|&c| c == 10));
}

#[test]
fn simulate_m2pl_k10_has_200_items() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("k10");
    ok(&[
        "--out",
        s(&dir),
        "simulate",
        "--setting",
        "m2pl-k10",
        "--n-obs",
        "20",
    ]);
    let mut rdr = csv::Reader::from_path(dir.join("responses.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 200);
    assert_eq!(rdr.records().count(), 20);
}

#[test]
fn fit_zero_epochs_emits_initial_values() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let out = tmp.path().join("fit0");
    ok(&[
        "--out",
        s(&out),
        "fit",
        "--data-dir",
        s(&data),
        "--algo",
        "qn-somh",
        "--max-epochs",
        "0",
    ]);
    let fit = json(out.join("fit.json"));
    assert_eq!(fit["epochs"], 0);
    assert_eq!(fit["algorithm"], "qn-somh");
    assert_eq!(fit["beta_final"], fit["beta_init"]);
    assert_eq!(json(out.join("estimate.json")), fit["beta_init"]);
    let rows = csv::Reader::from_path(out.join("checkpoints.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 1);
}

#[test]
fn fit_writes_information_and_logml() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let out = tmp.path().join("fit");
    ok(&[
        "--out",
        s(&out),
        "fit",
        "--data-dir",
        s(&data),
        "--algo",
        "d-somala",
        "--n",
        "40",
        "--max-epochs",
        "16",
        "--averaging-start",
        "4",
        "--info",
        "--logml",
        "50",
    ]);
    let mut rdr = csv::Reader::from_path(out.join("information.csv")).unwrap();
    let p = rdr.headers().unwrap().len() - 1;
    assert_eq!(rdr.records().count(), p);
    let est = json(out.join("logml.json"));
    assert!(est["total"].as_f64().unwrap().is_finite());
    let manifest = json(out.join("manifest.json"));
    assert_eq!(manifest["config"]["optimizer"]["max_epochs"], 16);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn fit_and_replicate_are_worker_invariant() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let fit_args = |out: &Path, workers: &str| {
        ok(&[
            "--seed",
            "4",
            "--workers",
            workers,
            "--out",
            s(out),
            "fit",
            "--data-dir",
            s(&data),
            "--algo",
            "qn-d-somala",
            "--n",
            "30",
            "--max-epochs",
            "4",
            "--averaging-start",
            "2",
            "--info",
        ]);
    };
    let (f1, f3) = (tmp.path().join("f1"), tmp.path().join("f3"));
    fit_args(&f1, "1");
    fit_args(&f3, "3");
    assert_same_csvs(&f1, &f3);
    let f_rerun = tmp.path().join("f_rerun");
    ok(&[
        "--workers",
        "2",
        "--out",
        s(&f_rerun),
        "rerun",
        s(&f1.join("manifest.json")),
    ]);
    assert_same_csvs(&f1, &f_rerun);
    assert_eq!(json(f_rerun.join("manifest.json"))["workers"], 2);

    let rep_args = |out: &Path, workers: &str| {
        ok(&[
            "--seed",
            "9",
            "--workers",
            workers,
            "--out",
            s(out),
            "replicate",
            "--setting",
            "multilevel-k5",
            "--n-obs",
            "60",
            "--algo",
            "d-somala,qn-somh",
            "--n",
            "20",
            "--reps",
            "3",
            "--max-epochs",
            "3",
        ]);
    };
    let (r1, r4) = (tmp.path().join("r1"), tmp.path().join("r4"));
    rep_args(&r1, "1");
    rep_args(&r4, "4");
    assert_same_csvs(&r1, &r4);
    let r_rerun = tmp.path().join("r_rerun");
    ok(&["--out", s(&r_rerun), "rerun", s(&r1.join("manifest.json"))]);
    assert_same_csvs(&r1, &r_rerun);
}

#[test]
fn tune_single_candidate_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let out = tmp.path().join("tune");
    let stdout = ok(&[
        "--out",
        s(&out),
        "tune",
        "--data-dir",
        s(&data),
        "--algo",
        "d-somh",
        "--n",
        "40",
        "--candidates",
        "0.7",
        "--tune-epochs",
        "3",
        "--tail-epochs",
        "2",
    ]);
    assert!(stdout.contains("chosen: 0.7"), "{stdout}");
    assert_eq!(json(out.join("tune.json"))["chosen"], 0.7);
}

#[test]
fn tune_default_grid_is_worker_invariant() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let run = |workers: &str| {
        let out = tmp.path().join(format!("tune{workers}"));
        ok(&[
            "--workers",
            workers,
            "--out",
            s(&out),
            "tune",
            "--data-dir",
            s(&data),
            "--algo",
            "d-somala",
            "--n",
            "40",
            "--tune-epochs",
            "2",
            "--tail-epochs",
            "1",
        ]);
        json(out.join("tune.json"))
    };
    let (a, b) = (run("1"), run("3"));
    assert_eq!(a["rows"].as_array().unwrap().len(), 4);
    assert_eq!(a, b);
}

#[test]
fn replicate_smoke_and_comparison_set() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("rep");
    ok(&[
        "--seed",
        "2",
        "--out",
        s(&out),
        "replicate",
        "--setting",
        "m2pl-k5",
        "--n-obs",
        "60",
        "--comparison-set",
        "--n",
        "20",
        "--reps",
        "2",
        "--max-epochs",
        "2",
    ]);
    let mut shapes = Vec::new();
    for f in ["mae_d.csv", "mae_a.csv", "mae_sigma.csv", "mae_average.csv"] {
        let mut rdr = csv::Reader::from_path(out.join(f)).unwrap();
        let cols = rdr.headers().unwrap().len();
        shapes.push((rdr.records().count(), cols));
    }
    assert!(shapes.iter().all(|&sh| sh == (6, 1 + 3)), "{shapes:?}");
    let report = json(out.join("report.json"));
    assert_eq!(report["replications"], 2);
    assert_eq!(report["labels"].as_array().unwrap().len(), 6);
}

#[test]
fn replicate_reads_algorithm_file() {
    let tmp = TempDir::new().unwrap();
    let algos = tmp.path().join("algos.json");
    std::fs::write(
        &algos,
        r#"[{"algorithm": "d-somala", "batch_size": 20, "step": 0.05, "label": "fast"},
            {"algorithm": "somh", "step": 0.4}]"#,
    )
    .unwrap();
    let out = tmp.path().join("rep");
    ok(&[
        "--out",
        s(&out),
        "replicate",
        "--setting",
        "multilevel-k5",
        "--n-obs",
        "40",
        "--algos",
        s(&algos),
        "--reps",
        "2",
        "--max-epochs",
        "2",
    ]);
    let labels = json(out.join("report.json"))["labels"].clone();
    assert_eq!(labels, serde_json::json!(["fast", "somh"]));
}

#[test]
fn evaluate_scores_truth_as_zero() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let out = tmp.path().join("eval");
    let truth = data.join("truth.json");
    ok(&[
        "--out",
        s(&out),
        "evaluate",
        "--estimate",
        s(&truth),
        "--truth",
        s(&truth),
    ]);
    let ev = json(out.join("evaluation.json"));
    assert_eq!(ev["average"], 0.0);
    assert_eq!(ev["blocks"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let data = m2pl_data(&tmp);
    let out = tmp.path().join("x");

    let (code, _, _) = somala(&["fit", "--bogus-flag"]);
    assert_eq!(code, 2);
    let (code, _, err) = somala(&[
        "--out",
        s(&out),
        "fit",
        "--data-dir",
        s(&data),
        "--algo",
        "nope",
    ]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = somala(&["--out", s(&out), "simulate", "--setting", "no-such-setting"]);
    assert_eq!(code, 2);
    let (code, _, _) = somala(&[
        "--out",
        s(&out),
        "fit",
        "--data-dir",
        s(&data),
        "--algo",
        "somala",
        "--n",
        "10",
    ]);
    assert_eq!(code, 2);

    let missing = tmp.path().join("missing.csv");
    let (code, _, _) = somala(&[
        "--out",
        s(&out),
        "fit",
        "--responses",
        s(&missing),
        "--q-matrix",
        s(&missing),
    ]);
    assert_eq!(code, 4);
    let m = json(out.join("manifest.json"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 4);

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let (code, _, _) = somala(&[
        "--out",
        s(&blocker.join("sub")),
        "simulate",
        "--setting",
        "m2pl-k5",
        "--n-obs",
        "5",
    ]);
    assert_eq!(code, 4);

    let div = tmp.path().join("div");
    let (code, _, _) = somala(&[
        "--out",
        s(&div),
        "fit",
        "--data-dir",
        s(&data),
        "--algo",
        "d-somala",
        "--gamma-scale",
        "1e300",
        "--max-epochs",
        "5",
    ]);
    assert_eq!(code, 3);
    let report = json(div.join("divergence.json"));
    let last = &report["last_checkpoint"];
    assert!(last["epoch"].as_u64().unwrap() < 5);
    assert!(last["beta"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.as_f64().unwrap().is_finite()));
    assert_eq!(json(div.join("manifest.json"))["exit_code"], 3);
}
