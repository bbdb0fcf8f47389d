use proptest::prelude::*;
use serde_json::json;
use std::path::Path;
use std::process::Command;
use theta_lab::cli::*;
use theta_lab::Error;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_theta-lab"))
}

fn write(dir: &Path, name: &str, v: &serde_json::Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn bdhe_scenario() -> serde_json::Value {
    json!({
        "kind": "bdhe",
        "seed": 3,
        "payload": {
            "B": {"g": 1, "B_re": [[0.1]], "B_im": [[1.2]]},
            "U": [[0.31, 0.05]], "V": [[0.2, 0.1]], "W": [[0.13, -0.04]], "Z": [[0.1, 0.07]],
            "dims": [4, 4, 4]
        }
    })
}

fn bethe_scenario() -> serde_json::Value {
    json!({
        "kind": "bethe",
        "payload": {"lattice": {"omega1": [1.7, 0.0], "omega2": [0.4, 1.6]}, "seeds": [[0.3, 0.2]], "n0": -2}
    })
}

fn cm2() -> serde_json::Value {
    json!({
        "system": "cm", "N": 2,
        "q": [[0.1, 0.2], [-0.4, -0.3]], "p": [[0.05, 0.0], [-0.05, 0.0]],
        "lattice": {"omega1": [1.0, 0.0], "omega2": [0.3, 1.1]},
        "z": [[0.33, 0.17]], "dt": 1e-3, "steps": 100
    })
}

fn config_message(v: serde_json::Value) -> String {
    match Scenario::from_value(&v) {
        Err(Error::ConfigInvalid(m)) => m,
        other => panic!("expected ConfigInvalid, got {other:?}"),
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let mut v = bdhe_scenario();
    v["payload"].as_object_mut().unwrap().remove("W");
    assert!(config_message(v).contains("`W`"));

    let mut v = bdhe_scenario();
    v["payload"]["dims"] = json!("big");
    assert!(config_message(v).contains("payload.dims"));

    let mut v = bdhe_scenario();
    v["payload"]["extra"] = json!(1);
    assert!(config_message(v).contains("extra"));

    let mut v = bdhe_scenario();
    v["kind"] = json!("heat");
    assert!(config_message(v).contains("kind"));

    let mut v = bdhe_scenario();
    v["payload"]["B"]["B_im"] = json!([[-1.0]]);
    assert!(config_message(v).contains("payload.B"));

    let v = json!({"kind": "cm", "payload": cm2()});
    let mut bad = v.clone();
    bad["payload"]["N"] = json!(3);
    assert!(config_message(bad).contains("payload.q"));
    let mut bad = v.clone();
    bad["payload"]["system"] = json!("rs");
    assert!(config_message(bad).contains("payload.system"));
    let mut bad = v;
    bad["payload"]["dt"] = json!(-1.0);
    assert!(config_message(bad).contains("payload.dt"));
}

#[test]
fn scenario_and_report_round_trip() {
    let sc = Scenario::from_value(&bdhe_scenario()).unwrap();
    assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
    let out = run_scenario(&sc).unwrap();
    let r = &out.report;
    assert!(r.pass);
    assert_eq!(r.scenario_hash, sc.hash());
    assert_eq!(ResidualReport::from_json(&r.to_json()).unwrap(), *r);
    // The embedded scenario reruns to the same report.
    let again = run_scenario(&r.provenance.scenario).unwrap();
    assert_eq!(again.report.to_json(), r.to_json());
    assert!(r.residual("bdhe").unwrap().value.unwrap() <= 1e-8);
    assert_eq!(r.provenance.artifacts, vec!["bdhe.csv".to_string()]);
}

#[test]
fn zero_tolerance_fails_and_round_trips() {
    let mut sc = Scenario::from_value(&bdhe_scenario()).unwrap();
    sc.tolerances.insert("bdhe".into(), 0.0);
    let r = run_scenario(&sc).unwrap().report;
    assert!(!r.pass);
    assert_eq!(r.status(), Status::Fail);
    assert_eq!(ResidualReport::from_json(&r.to_json()).unwrap(), r);
}

#[test]
fn hash_depends_on_content_not_layout() {
    let a = Scenario::from_json(r#"{"kind": "bethe", "seed": 1, "payload": {"seeds": [[0.3, 0.2]], "lattice": {"omega2": [0.4, 1.6], "omega1": [1.7, 0.0]}}}"#).unwrap();
    let b = Scenario::from_json(r#"{"payload": {"lattice": {"omega1": [1.7, 0.0], "omega2": [0.4, 1.6]}, "seeds": [[0.3, 0.2]]}, "seed": 1, "kind": "bethe"}"#).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    Overrides { seed: Some(2), tol: None }.apply(&mut c);
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn pole_system_files_are_wrapped() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "cm2.json", &cm2());
    let s = load_scenarios(&p).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].kind, Kind::Cm);
    assert_eq!(s[0].name.as_deref(), Some("cm2"));
}

#[test]
fn empty_list_passes_with_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "empty.json", &json!([]));
    let entries = run_file(&p, &Overrides::default());
    assert!(entries.is_empty());
    assert_eq!(worst(&entries), Status::Pass);
    let out = bin().arg("run").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "[]");
}

#[test]
fn batch_records_invalid_files_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a-bethe.json", &bethe_scenario());
    std::fs::write(dir.path().join("b-broken.json"), "{\"kind\": ").unwrap();
    write(dir.path(), "c-bdhe.json", &bdhe_scenario());
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let entries = batch(dir.path(), &Overrides::default()).unwrap();
    let labels: Vec<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, ["a-bethe", "b-broken", "c-bdhe"]);
    let status: Vec<Status> = entries.iter().map(Entry::status).collect();
    assert_eq!(status, [Status::Pass, Status::Error, Status::Pass]);
    assert_eq!(worst(&entries), Status::Error);
    let table = summary_table(&entries);
    assert!(table.lines().nth(2).unwrap().contains("error"));
    assert_eq!(summary_csv(&entries).lines().count(), 4);

    let out = tempfile::tempdir().unwrap();
    let run = bin().arg("batch").arg(dir.path()).arg("--out").arg(out.path()).output().unwrap();
    assert_eq!(run.status.code(), Some(1));
    assert!(out.path().join("summary.csv").exists());
    assert!(out.path().join("a-bethe.report.json").exists());
}

#[test]
fn residual_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "tight.json", &bdhe_scenario());
    let out = bin().arg("run").arg(&p).arg("--tol").arg("1e-30").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let r: ResidualReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r.provenance.scenario.tol, Some(1e-30));
    let ok = bin().arg("run").arg("--config").arg(&p).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn missing_file_is_an_error() {
    let out = bin().args(["run", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let mut v = bdhe_scenario();
    v["payload"]["dims"] = json!([2, 4, 4]);
    let p = write(dir.path(), "bad.json", &v);
    let out = bin().arg("run").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("payload.dims"));
}

#[test]
fn check_identities_reports_addition_and_quasiperiodicity() {
    let out = bin().args(["check-identities", "--g", "2", "--samples", "10", "--seed", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r: ResidualReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r.provenance.seed, 7);
    assert!(r.residual("addition_g2").unwrap().value.unwrap() <= 1e-9);
    assert!(r.residual("quasiperiodicity_g2").unwrap().value.unwrap() <= 1e-9);
    assert!(r.residual("addition_g1").is_none());
}

#[test]
fn cm_simulate_writes_trajectory_and_isospectrality() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "cm2.json", &cm2());
    let out = dir.path().join("out");
    let run = bin().args(["cm", "simulate", "--config"]).arg(&p).arg("--out").arg(&out).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(out.join("cm2.trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,re_q0,im_q0,re_q1,im_q1,re_p0,im_p0,re_p1,im_p1,re_H,im_H,re_trL1,im_trL1,re_trL2,im_trL2"
    );
    assert_eq!(lines.count(), 101);
    let r = ResidualReport::from_json(&std::fs::read_to_string(out.join("cm2.report.json")).unwrap()).unwrap();
    assert!(r.residual("spectral_drift").unwrap().pass);
    assert!(r.residual("lax").unwrap().pass);
    assert_eq!(r.provenance.notes["flow_kappa"], json!(4.0));
}

#[test]
fn csv_format_and_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = bdhe_scenario();
    v["outputs"] = json!({"plot_data": true});
    let p = write(dir.path(), "grid.json", &v);
    let out = dir.path().join("out");
    let run = bin().arg("run").arg(&p).args(["--format", "csv", "--out"]).arg(&out).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    let report = std::fs::read_to_string(out.join("grid.report.csv")).unwrap();
    assert!(report.starts_with(ResidualReport::csv_header()));
    assert!(report.contains(",bdhe,"));
    let dat = std::fs::read_to_string(out.join("grid.bdhe.dat")).unwrap();
    assert!(dat.starts_with("# index p0 p1 p2 residual"));
}

#[test]
fn thread_count_does_not_change_reports() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.json", &bdhe_scenario());
    write(
        dir.path(),
        "b.json",
        &json!({"kind": "secant", "seed": 4, "payload": {"pole_pairs": {"genus1": 2, "genus2": 1}}}),
    );
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = tempfile::tempdir().unwrap();
        let run = bin()
            .arg("batch")
            .arg(dir.path())
            .arg("--out")
            .arg(out.path())
            .env("THETA_LAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(run.status.code(), Some(0));
        let a = std::fs::read(out.path().join("a.report.json")).unwrap();
        let b = std::fs::read(out.path().join("b.report.json")).unwrap();
        outs.push((a, b));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn scenario_kinds_run() {
    let cases = [
        json!({"kind": "rs", "payload": {"q": [[0.1, 0.2], [0.55, -0.35]], "p": [[0.1, 0.05], [-0.2, 0.1]],
               "lattice": {"omega1": [1.7, 0.0], "omega2": [0.2, 1.9]}, "z": [[0.41, 0.23]], "steps": 50}}),
        json!({"kind": "involution", "payload": {"system": "toda", "B": {"g": 1, "B_re": [[0.1]], "B_im": [[1.1]]},
               "U": [[0.37, 0.11]], "zeta": [[0.13, -0.07]],
               "window": {"center": [0.02, 0.01], "half_width": 2.13, "half_height": 2.07}}}),
        json!({"kind": "bethe", "payload": {"lattice": {"omega1": [1.7, 0.0], "omega2": [0.4, 1.6]},
               "seeds": [[0.3, 0.2], [-0.45, 0.7]], "len": 6, "solve": true}}),
        json!({"kind": "theta-check", "payload": {"battery": "weierstrass", "grid": 4}}),
        json!({"kind": "cm", "seed": 9, "payload": {"lattice": {"omega1": [1.0, 0.0], "omega2": [0.3, 1.1]},
               "random_states": 6, "heat_states": 3}}),
    ];
    for v in cases {
        let sc = Scenario::from_value(&v).unwrap();
        let r = run_scenario(&sc).unwrap().report;
        assert!(r.pass, "{}", r.to_json());
    }
}

#[test]
fn wrong_toda_layout_fails() {
    let sc = Scenario::from_value(&json!({"kind": "toda", "payload": {
        "lattice": {"omega1": [1.0, 0.0], "omega2": [0.2, 1.1]}, "a": [0.45, 0.3], "Z": [0.13, 0.07], "layout": "backward"}}))
    .unwrap();
    let r = run_scenario(&sc).unwrap().report;
    assert!(!r.residual("toda").unwrap().pass);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tolerance_overrides_gate_upper_residuals(t in 1e-20f64..1e-2) {
        let mut sc = Scenario::from_value(&bethe_scenario()).unwrap();
        sc.tol = Some(t);
        let r = run_scenario(&sc).unwrap().report;
        let res = r.residual("bethe").unwrap();
        prop_assert_eq!(res.threshold, Some(t));
        prop_assert_eq!(res.pass, res.value.unwrap() <= t);
        prop_assert_eq!(r.pass, res.pass);
    }

    #[test]
    fn reports_are_reproducible(seed in 0u64..1000) {
        let mut sc = Scenario::from_value(&json!({"kind": "theta-check", "payload": {"genera": [1, 2], "samples": 3}})).unwrap();
        sc.seed = seed;
        let a = run_scenario(&sc).unwrap().report.to_json();
        let b = run_scenario(&sc).unwrap().report.to_json();
        prop_assert_eq!(a, b);
    }
}
