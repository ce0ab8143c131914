use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vaopf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaopf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the unlimited star-and-path case into `dir`.
fn fig1(dir: &Path) {
    let out = vaopf(&["--out", p(dir), "gen-fig1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn case_args(dir: &Path) -> Vec<String> {
    vec![
        "--case".into(),
        dir.join("fig1.m").to_string_lossy().into(),
        "--stoch".into(),
        dir.join("fig1.json").to_string_lossy().into(),
    ]
}

fn run(dir: &Path, out: &Path, rest: &[&str]) -> Output {
    let mut args = case_args(dir);
    args.extend(["--out".to_string(), p(out).to_string()]);
    args.extend(rest.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    vaopf(&refs)
}

#[test]
fn solve_star_case_dispatches_cheap_generator() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    let out = run(dir.path(), dir.path(), &["solve"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sol = json(&dir.path().join("solution.json"));
    let p0 = sol["p_bar"][0].as_f64().unwrap();
    assert!((p0 - 300.0).abs() < 1e-4, "p_bar[0] = {p0}");
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["status"], "optimal");
}

#[test]
fn missing_case_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.m");
    let out = vaopf(&["--case", p(&missing), "--out", p(dir.path()), "solve"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vaopf(&["--out", p(dir.path()), "solve"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cutting_plane_matches_direct() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    let direct = dir.path().join("direct");
    let cut = dir.path().join("cut");
    assert!(run(dir.path(), &direct, &["solve"]).status.success());
    let out = run(
        dir.path(),
        &cut,
        &["solve", "--mode", "safety-cutting-plane"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = json(&direct.join("summary.json"))["expected_cost"]
        .as_f64()
        .unwrap();
    let b = json(&cut.join("summary.json"))["expected_cost"]
        .as_f64()
        .unwrap();
    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn shift_without_iterations_records_start_only() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    let out = run(dir.path(), dir.path(), &["shift", "-K", "0"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = trace
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["k"], 0);
}

#[test]
fn validation_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    assert!(run(dir.path(), dir.path(), &["solve"]).status.success());
    let sol = dir.path().join("solution.json");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(
            dir.path(),
            &out_dir,
            &[
                "--seed",
                "7",
                "validate",
                "--solution",
                p(&sol),
                "--samples",
                "5000",
            ],
        );
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stdout)
        );
        outputs.push((
            fs::read(out_dir.join("validation.csv")).unwrap(),
            fs::read(out_dir.join("validation.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("line_id,mean,variance,violation_rate")
    );
}

#[test]
fn validation_flags_lines_below_their_flows() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    assert!(run(dir.path(), dir.path(), &["solve"]).status.success());
    let sol = dir.path().join("solution.json");
    // The same dispatch checked against limits far below the flows.
    let case = dir.path().join("fig1.m");
    let text = fs::read_to_string(&case).unwrap().replace("80000", "150");
    fs::write(&case, text).unwrap();
    let out = run(
        dir.path(),
        &dir.path().join("tight"),
        &["validate", "--solution", p(&sol), "--samples", "2000"],
    );
    assert_eq!(out.status.code(), Some(1));
    let summary = json(&dir.path().join("tight/validation.json"));
    assert_eq!(summary["ok"], false);
}

#[test]
fn stats_reports_both_row_forms() {
    let dir = tempfile::tempdir().unwrap();
    fig1(dir.path());
    let out = run(dir.path(), dir.path(), &["stats"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["buses"], 24);
    assert!(v["formulation_breve"].is_object());
    assert!(v["formulation_laplacian"].is_object());
}
