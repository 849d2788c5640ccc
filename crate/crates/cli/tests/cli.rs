use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpflow::experiments::emit_plot_data;
use mpflow::Error;
use tempfile::TempDir;

fn mpflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn plot_series(path: &Path) -> BTreeSet<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "series", "value"]);
    rdr.records().map(|r| r.unwrap()[1].to_string()).collect()
}

const SYNTHETIC: &str = r#"{
  "loss": {"monomials": [[0, 1, 2]], "targets": [1.0]},
  "flow": {"q": 2000, "d": 3, "steps": 40, "record_every": 5, "record_kernel": true}
}"#;

#[test]
fn decompose_check_writes_residuals_and_meta() {
    let tmp = TempDir::new().unwrap();
    let o = mpflow(tmp.path(), &["decompose-check", "--n", "5", "--q", "8", "--seeds", "20", "--out", "dc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("dc");
    for f in ["residuals.csv", "summary.json", "run_meta.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert!(summary["max_relative_residual"].as_f64().unwrap() <= 1e-8);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "decompose-check");
    assert_eq!(meta["config"]["n"], 5);
}

#[test]
fn decompose_check_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = mpflow(tmp.path(), &["decompose-check", "--n", "3", "--q", "2", "--seeds", "5", "--out", out]);
        assert!(o.status.success());
    }
    for f in ["residuals.csv", "summary.json", "run_meta.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn missing_config_prints_usage_and_exits_one() {
    let tmp = TempDir::new().unwrap();
    for cmd in ["train-abelian", "decouple"] {
        let o = mpflow(tmp.path(), &[cmd, "--out", "x"]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        assert!(stderr(&o).contains("Usage"), "{cmd}: {}", stderr(&o));
    }
    let o = mpflow(tmp.path(), &["maxent", "--targets", "0.3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("usage"));
}

#[test]
fn unknown_subcommand_and_unknown_keys_are_validation_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(mpflow(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"loss": {"monomials": [[0]], "targets": [1.0]}, "flow": {"q": 10, "bogus": 1}}"#,
    )
    .unwrap();
    let o = mpflow(tmp.path(), &["decouple", "--config", "cfg.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn numerical_guard_exits_two() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"loss": {"monomials": [[0, 1, 2]], "targets": [100.0]}, "flow": {"q": 200, "dt": 10.0, "steps": 50}}"#,
    )
    .unwrap();
    let o = mpflow(tmp.path(), &["decouple", "--config", "cfg.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical guard"));
}

#[test]
fn synthetic_run_plot_data_has_rho_h_lambda() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cfg.json"), SYNTHETIC).unwrap();
    let o = mpflow(tmp.path(), &["decouple", "--config", "cfg.json", "--out", "traj"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = tmp.path().join("traj");
    for f in ["trajectory.csv", "decoupling.csv", "spectrum_input.json", "summary.json", "run_meta.json"] {
        assert!(traj.join(f).is_file(), "{f} missing");
    }
    let header = fs::read_to_string(traj.join("trajectory.csv")).unwrap();
    let header = header.lines().next().unwrap();
    for col in ["t", "H", "rho_0", "G_0_0", "G_offdiag_max", "symmetry_z"] {
        assert!(header.split(',').any(|c| c == col), "{col} not in {header}");
    }

    let o = mpflow(tmp.path(), &["spectrum", "--traj", "traj"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["spectrum.csv", "crossings.json", "summary.json", "run_meta.json"] {
        assert!(traj.join("spectrum").join(f).is_file(), "{f} missing");
    }
    let series = plot_series(&traj.join("plot_data.csv"));
    let want: BTreeSet<String> = ["H", "rho", "lambda_1"].iter().map(|s| s.to_string()).collect();
    assert_eq!(series, want);
}

#[test]
fn spectrum_refuses_directory_without_run_meta() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cfg.json"), SYNTHETIC).unwrap();
    assert!(mpflow(tmp.path(), &["decouple", "--config", "cfg.json", "--out", "traj"]).status.success());
    fs::remove_file(tmp.path().join("traj").join("run_meta.json")).unwrap();
    let o = mpflow(tmp.path(), &["spectrum", "--traj", "traj"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run_meta.json"));
}

#[test]
fn train_abelian_emits_rho_kkk_series() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"n": 5, "flow": {"q": 16, "dt": 1e-3, "steps": 20, "record_every": 5}}"#,
    )
    .unwrap();
    let o = mpflow(tmp.path(), &["train-abelian", "--config", "cfg.json", "--out", "ab"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let series = plot_series(&tmp.path().join("ab").join("plot_data.csv"));
    for k in 1..5 {
        assert!(series.contains(&format!("rho_kkk_{k}")), "{series:?}");
    }
    assert!(series.contains("H") && series.contains("distance_to_01"));
}

#[test]
fn empty_trajectory_gives_header_only_plot_data() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("trajectory.csv"), "t,H,rho_0\n").unwrap();
    let out = emit_plot_data(tmp.path()).unwrap();
    assert_eq!(fs::read_to_string(out).unwrap(), "t,series,value\n");
}

#[test]
fn corrupt_trajectory_reports_file_and_line() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("trajectory.csv"), "t,H,rho_0\n0,1.0,0.5\n0.1,oops,0.6\n").unwrap();
    match emit_plot_data(tmp.path()) {
        Err(Error::CorruptArtifact { file, line, .. }) => {
            assert!(file.ends_with("trajectory.csv"));
            assert_eq!(line, 3);
        }
        other => panic!("expected a corrupt-artifact error, got {other:?}"),
    }
}

#[test]
fn compose_point_masses() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("a.json"), r#"{"dim": 2, "points": [[1.0, 0.0]], "weights": [1.0]}"#).unwrap();
    fs::write(d.join("b.json"), r#"{"dim": 2, "points": [[1.0, 1.0]], "weights": [1.0]}"#).unwrap();
    fs::write(d.join("fam.json"), r#"{"monomials": [[0], [1], [0, 1]]}"#).unwrap();
    let o = mpflow(d, &["compose", "a.json", "b.json", "--family", "fam.json", "--out", "co"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("co/composition.json")).unwrap()).unwrap();
    assert_eq!(report["product_partition"]["ones"], serde_json::json!([0]));
    assert_eq!(report["product_partition"]["zeros"], serde_json::json!([1, 2]));
    assert!(d.join("co/run_meta.json").is_file());

    let o = mpflow(d, &["compose", "a.json", "nope.json", "--family", "fam.json", "--out", "co2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn maxent_recovers_unit_multiplier() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("fam.json"), r#"{"monomials": [[0]]}"#).unwrap();
    // E[z] = coth(1) - 1 for density ~ exp(z) on [-1, 1].
    let o = mpflow(
        d,
        &["maxent", "--monomials", "fam.json", "--targets", "0.313035285499331303636", "--box", "1", "--dim", "1", "--out", "me"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sol: serde_json::Value = serde_json::from_slice(&fs::read(d.join("me/solution.json")).unwrap()).unwrap();
    assert!((sol["lambda"][0].as_f64().unwrap() - 1.0).abs() <= 1e-6);
    for key in ["logZ", "moments", "iterations"] {
        assert!(sol.get(key).is_some(), "{key}");
    }
}

#[test]
fn maxent_beyond_grid_support_exits_two() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("fam.json"), r#"{"monomials": [[0]]}"#).unwrap();
    let o = mpflow(d, &["maxent", "--monomials", "fam.json", "--targets", "0.9999", "--box", "1", "--dim", "1", "--out", "me"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(d.join("me/solution.json").is_file());
}

#[test]
fn hermite_check_passes_small_suite() {
    let tmp = TempDir::new().unwrap();
    let o = mpflow(
        tmp.path(),
        &["hermite-check", "--dim", "2", "--max-degree", "3", "--samples", "20000", "--out", "hc"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("hc/hermite_check.csv").is_file());
}

#[test]
fn in_process_run_matches_binary_exit_codes() {
    assert_eq!(mpflow_cli::run(["mpflow", "--help"]), 0);
    assert_eq!(mpflow_cli::run(["mpflow", "decouple"]), 1);
}
