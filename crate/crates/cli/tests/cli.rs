use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TRUTH: &str = r#"{"p":2,"alpha":[[2,0],[2,2]],"kappa":[[1.0,0.0],[1.0,1.0]],"b":[[1.0,0.0],[-0.5,1.0]],"noise_alpha":[0,0],"noise_kappa":[1.0,1.0]}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multispde"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

/// Mesh, truth spec and simulated observations on a small square.
fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    std::fs::write(dir.join("truth.json"), TRUTH).unwrap();
    std::fs::write(
        dir.join("fit.json"),
        format!(r#"{{"template": {TRUTH}, "starts": 1, "nugget_variance": [0.01, 0.01]}}"#),
    )
    .unwrap();
    ok(&dir, &["mesh", "--region", "0,0,8,8", "--edge", "1", "--out", "mesh.json"]);
    ok(
        &dir,
        &[
            "sample", "--spec", "truth.json", "--mesh", "mesh.json", "--seed", "5", "--observations", "60",
            "--nugget", "0.01,0.01", "--obs-out", "obs.csv", "--out", "field.csv",
        ],
    );
    Workspace { _tmp: tmp, dir }
}

fn provenance_line(text: &str) -> &str {
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# multispde "), "{first}");
    assert!(first.contains("config="));
    first
}

#[test]
fn mesh_json_round_trips_and_carries_provenance() {
    let ws = workspace();
    let text = read(&ws.dir, "mesh.json");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["vertices"].as_array().unwrap().len(), 81);
    ok(&ws.dir, &["mesh", "--region", "0,0,8,8", "--edge", "1", "--fem-out", "fem", "--out", "again.json"]);
    assert_eq!(read(&ws.dir, "again.json"), text);
    assert!(read(&ws.dir, "fem/C.mtx").starts_with("%%MatrixMarket"));
    assert!(read(&ws.dir, "fem/G.mtx").starts_with("%%MatrixMarket"));
}

#[test]
fn sampling_is_reproducible_and_seeded() {
    let ws = workspace();
    let field = read(&ws.dir, "field.csv");
    assert!(provenance_line(&field).contains("seed=5"));
    assert_eq!(field.lines().nth(1).unwrap(), "vertex,x,y,field,value");
    assert_eq!(field.lines().count(), 2 + 2 * 81);
    let obs = read(&ws.dir, "obs.csv");
    assert_eq!(obs.lines().count(), 2 + 120);

    ok(&ws.dir, &["sample", "--spec", "truth.json", "--mesh", "mesh.json", "--seed", "5", "--observations", "60",
        "--nugget", "0.01,0.01", "--out", "again.csv"]);
    assert_eq!(read(&ws.dir, "again.csv"), field);
    ok(&ws.dir, &["sample", "--spec", "truth.json", "--mesh", "mesh.json", "--seed", "6", "--out", "other.csv"]);
    assert_ne!(read(&ws.dir, "other.csv").lines().nth(2), field.lines().nth(2));
}

#[test]
fn correlation_surface_is_one_at_reference() {
    let ws = workspace();
    ok(&ws.dir, &["corr", "--preset", "bivariate-negative", "--mesh", "mesh.json", "--vertex", "40", "--out", "c.csv"]);
    let text = read(&ws.dir, "c.csv");
    provenance_line(&text);
    let row = text
        .lines()
        .find(|l| l.starts_with("40,") && l.contains(",0,0,"))
        .unwrap();
    let c: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((c - 1.0).abs() < 1e-12);
    let cross = text.lines().find(|l| l.starts_with("40,") && l.contains(",0,1,")).unwrap();
    let c12: f64 = cross.rsplit(',').next().unwrap().parse().unwrap();
    assert!(c12 < 0.0);
}

#[test]
fn spectra_and_matching_outputs() {
    let ws = workspace();
    let out = ok(&ws.dir, &["spectra", "--preset", "bivariate-positive", "--points", "4", "--k-min", "0.1", "--k-max", "100"]);
    let text = String::from_utf8(out.stdout).unwrap();
    provenance_line(&text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "|k|,S11,S12,S22");
    assert_eq!(lines.len(), 6);
    assert!(lines[2].starts_with("1.0000000000000001e-1,"));

    let out = ok(&ws.dir, &["match", "--spec", "truth.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["matched"]["a"], 1.0);
    assert!(v["matched"]["rho12"].as_f64().unwrap() > 0.0);
    let bad = run(&ws.dir, &["match", "--preset", "bivariate-positive"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn fit_then_predict_from_the_fit_output() {
    let ws = workspace();
    let out = run(&ws.dir, &["fit", "--data", "obs.csv", "--mesh", "mesh.json", "--config", "fit.json", "--out", "fitres.json"]);
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    let v: serde_json::Value = serde_json::from_str(&read(&ws.dir, "fitres.json")).unwrap();
    assert_eq!(v["result"]["estimates"].as_array().unwrap().len(), 6);
    assert!(v["provenance"]["config_hash"].as_str().unwrap().len() == 64);

    std::fs::write(ws.dir.join("targets.csv"), "x,y,field\n4,4,0\n4,4,1\n").unwrap();
    ok(&ws.dir, &["predict", "--spec", "fitres.json", "--mesh", "mesh.json", "--data", "obs.csv", "--nugget", "0.01,0.01",
        "--targets", "targets.csv", "--variance", "--out", "pred.csv"]);
    let pred = read(&ws.dir, "pred.csv");
    provenance_line(&pred);
    assert_eq!(pred.lines().nth(1).unwrap(), "x,y,field,mean,variance");
    for l in pred.lines().skip(2) {
        let var: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(var > 0.0 && var < 1.0);
    }
}

#[test]
fn nugget_and_compare_emit_artifacts() {
    let ws = workspace();
    let out = run(&ws.dir, &["nugget", "--data", "obs.csv", "--mesh", "mesh.json", "--config", "fit.json", "--tau2", "0.1,0.1",
        "--max-iters", "2", "--no-refit", "--out", "traj.csv", "--state-out", "state.json"]);
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    let traj = read(&ws.dir, "traj.csv");
    provenance_line(&traj);
    assert_eq!(traj.lines().nth(1).unwrap(), "iteration,tau2_field1,tau2_field2");
    assert!(traj.lines().count() >= 4);
    let state: serde_json::Value = serde_json::from_str(&read(&ws.dir, "state.json")).unwrap();
    assert_eq!(state["history"].as_array().unwrap().len(), traj.lines().count() - 2);

    std::fs::write(ws.dir.join("cmp.json"), format!(r#"{{"spde": {}}}"#, read(&ws.dir, "fit.json"))).unwrap();
    let args = ["compare", "--data", "obs.csv", "--mesh", "mesh.json", "--config", "cmp.json", "--holdout", "0.2", "--seed", "9"];
    let a = ok(&ws.dir, &args);
    let b = ok(&ws.dir, &args);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["provenance"]["seed"], 9);
    assert_eq!(v["fields"].as_array().unwrap().len(), 2);
    let too_big = run(&ws.dir, &["compare", "--data", "obs.csv", "--mesh", "mesh.json", "--config", "cmp.json", "--holdout", "1.0"]);
    assert_eq!(too_big.status.code(), Some(2));
}

#[test]
fn input_errors_exit_with_code_two() {
    let ws = workspace();
    let missing = run(&ws.dir, &["fit", "--data", "missing.csv", "--mesh", "mesh.json", "--config", "fit.json"]);
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(ws.dir.join("bad.csv"), "x,y,field,value\n1,1,0,0.5\n2,2,7,0.1\n").unwrap();
    let schema = run(&ws.dir, &["fit", "--data", "bad.csv", "--mesh", "mesh.json", "--config", "fit.json"]);
    assert_eq!(schema.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&schema.stderr).contains("row"));

    std::fs::write(ws.dir.join("garbled.csv"), "x,y,field,value\n1,1,0,abc\n").unwrap();
    let parse = run(&ws.dir, &["fit", "--data", "garbled.csv", "--mesh", "mesh.json", "--config", "fit.json"]);
    assert_eq!(parse.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("line 2"));

    let preset = run(&ws.dir, &["spectra", "--preset", "nonexistent"]);
    assert_eq!(preset.status.code(), Some(2));
    let region = run(&ws.dir, &["mesh", "--region", "0,0,0,5", "--edge", "1"]);
    assert_eq!(region.status.code(), Some(2));
}
