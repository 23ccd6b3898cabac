use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use opf_distill::map::{DistillationMap, Method};
use opf_distill::proxalg::GroupMode;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opf-distill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn model_check_prints_summary() {
    let out = run(&["model", "check"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["buses"], 37);
    assert_eq!(v["ders"], 10);
    assert!(v["r_min_eigenvalue"].as_f64().unwrap() > 0.0);
}

#[test]
fn fit_writes_one_map_per_task_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run(&[
            "fit",
            "--methods",
            "pca,deim",
            "--k",
            "2",
            "--t",
            "30",
            "--seed",
            "4",
            "--out-dir",
            path(d),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for task in ["pca_k2", "deim_k2"] {
        let first = std::fs::read(a.join(task).join("map.json")).unwrap();
        assert_eq!(first, std::fs::read(b.join(task).join("map.json")).unwrap());
        let map = DistillationMap::from_json(std::str::from_utf8(&first).unwrap()).unwrap();
        assert_eq!(map.k(), 2);
    }
    assert_eq!(std::fs::read_dir(&a).unwrap().count(), 2);
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"methods": ["GL"], "k": [3], "t": 25, "out_dir": "{}", "algorithm": {{"bisection_rounds": 15}}}}"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["fit", "--config", path(&cfg), "--methods", "gl2"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("gl2_k3/map.json").exists());
    assert!(out_dir.join("gl2_k3/trace.csv").exists());
    assert!(!out_dir.join("gl_k3").exists());
    let trace = std::fs::read_to_string(out_dir.join("gl2_k3/trace.csv")).unwrap();
    assert!(trace.starts_with("iter,cost,smooth_cost,penalty,nnz_groups,step_kind\n"));
}

#[test]
fn exit_codes() {
    let out = run(&["fit", "--methods", "pca,nope", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    assert_eq!(run(&["fit", "--methods", "pca"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let out = run(&[
        "scenarios",
        "stats",
        "--scenarios",
        "/nonexistent/scenarios.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "feature_id,kind,bus_id,t1\np4,p_net,4,NaN\n").unwrap();
    let out = run(&["scenarios", "stats", "--scenarios", path(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn scenario_gen_then_opf_solve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(
        run(&["scenarios", "gen", "--t", "12", "--out-dir", path(d)])
            .status
            .success()
    );
    for f in ["scenarios.csv", "buses.csv", "lines.csv"] {
        assert!(d.join(f).exists());
    }
    let (buses, lines, scenarios) = (
        d.join("buses.csv"),
        d.join("lines.csv"),
        d.join("scenarios.csv"),
    );
    let feeder = ["--buses", path(&buses), "--lines", path(&lines)];
    let mut args = vec![
        "opf",
        "solve",
        "--scenarios",
        path(&scenarios),
        "--out-dir",
        path(d),
    ];
    args.extend(feeder);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.join("opf.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.lines().skip(1).all(|l| l.ends_with("optimal")));

    // a custom feeder without scenarios has nothing to generate from
    let mut args = vec!["scenarios", "stats"];
    args.extend(feeder);
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn eval_identity_zero_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = 50;
    let identity = DistillationMap::from_selection(
        Method::Gl2,
        p,
        (0..p).collect(),
        DMatrix::identity(p, p),
        GroupMode::Column,
        None,
    )
    .unwrap();
    let zero = DistillationMap::from_selection(
        Method::Gl,
        p,
        Vec::new(),
        DMatrix::zeros(p, 0),
        GroupMode::Column,
        None,
    )
    .unwrap();
    let small = DistillationMap::from_selection(
        Method::Gl,
        3,
        vec![0],
        DMatrix::zeros(3, 1),
        GroupMode::Column,
        None,
    )
    .unwrap();
    identity.save(&d.join("i.json")).unwrap();
    zero.save(&d.join("z.json")).unwrap();
    small.save(&d.join("s.json")).unwrap();

    let out_dir = d.join("ev");
    let out = run(&[
        "eval",
        path(&d.join("i.json")),
        path(&d.join("z.json")),
        "--t",
        "20",
        "--out-dir",
        path(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let reports: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[0]["method"], "OPF");
    assert_eq!(reports[1]["data_error"].as_f64().unwrap(), 0.0);
    assert!(reports[1]["minimizer_error"].as_f64().unwrap() <= 1e-12);
    assert_eq!(reports[2]["data_error"].as_f64().unwrap(), 1.0);
    for r in reports {
        assert_eq!(r["linear"]["samples"], 36 * 20);
    }
    assert_eq!(
        reports[1]["linear"]["out_of_band"],
        reports[0]["linear"]["out_of_band"]
    );
    assert_eq!(
        reports[1]["ac"]["out_of_band"],
        reports[0]["ac"]["out_of_band"]
    );
    let csv = std::fs::read_to_string(out_dir.join("voltages.csv")).unwrap();
    assert!(csv.starts_with("method,k,scenario,bus,model,v_pu\n"));
    assert!(csv.lines().any(|l| l.starts_with("OPF,50,")));

    let out = run(&[
        "eval",
        path(&d.join("s.json")),
        "--t",
        "20",
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
