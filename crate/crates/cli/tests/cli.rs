use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gates() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gates"))
}

fn run(args: &[&str]) -> Output {
    gates().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn d8(dir: &Path) -> PathBuf {
    write(
        dir,
        "d8.csv",
        "y,t,score\n1,1,10\n2,0,20\n3,1,30\n4,0,40\n10,1,50\n12,0,60\n14,1,70\n16,0,80\n",
    )
}

/// Deterministic experiment with two covariates and half the units treated.
fn synthetic(dir: &Path, n: usize) -> PathBuf {
    let mut body = String::from("y,t,x1,x2\n");
    for i in 0..n {
        let x1 = ((i * 37) % 101) as f64 / 50.0 - 1.0;
        let x2 = ((i * 53) % 97) as f64 / 48.0 - 1.0;
        let t = (i * 7) % 4 < 2;
        let y = x1 + if t { 1.0 + 2.0 * x1 + x2 } else { 0.0 } + ((i * 13) % 7) as f64 / 7.0;
        body.push_str(&format!("{y},{},{x1},{x2}\n", t as u8));
    }
    write(dir, "synthetic.csv", &body)
}

fn assert_close(a: &Value, b: &[f64], tol: f64) {
    let a: Vec<f64> = a.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn gates_on_d8() {
    let dir = tempfile::tempdir().unwrap();
    let data = d8(dir.path());
    let out = run(&["gates", "--data", data.to_str().unwrap(), "--k", "2", "--n-mc", "2000", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["command"], "gates");
    assert_eq!(v["schema_version"], 1);
    assert_close(&v["tau"], &[-1.0, -2.0], 1e-12);
    assert!((v["ate"].as_f64().unwrap() + 1.5).abs() < 1e-12);
    assert_eq!(v["groups"].as_array().unwrap().len(), 2);
    assert_eq!(v["tests"]["heterogeneity"]["df"], 1);
    assert_eq!(v["tests"]["rank_consistency"]["draws"], 2000);
    assert_eq!(v["config"]["seed"], 3);
}

#[test]
fn report_round_trips_and_out_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let data = d8(dir.path());
    let out_path = dir.path().join("r.json");
    let args = ["gates", "--data", data.to_str().unwrap(), "--k", "2", "--n-mc", "1000", "--seed", "9"];
    let stdout = run(&args);
    let mut with_out: Vec<&str> = args.to_vec();
    with_out.extend(["--out", out_path.to_str().unwrap()]);
    let filed = run(&with_out);
    assert!(filed.status.success());
    assert!(filed.stdout.is_empty());
    let a = json(&stdout);
    let b: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(a, b);
    let again: Value = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(a, again);
}

#[test]
fn missing_score_column_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "noscore.csv", "y,t\n1,1\n2,0\n3,1\n4,0\n");
    let out = run(&["gates", "--data", data.to_str().unwrap(), "--k", "2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let v = json(&out);
    assert_eq!(v["error"]["kind"], "schema");
    assert!(v["error"]["message"].as_str().unwrap().contains("score"));
}

#[test]
fn bad_level_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = d8(dir.path());
    let out = run(&["gates", "--data", data.to_str().unwrap(), "--k", "2", "--seed", "1", "--level", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["exit_code"], 2);
}

#[test]
fn missing_file_and_bad_flags_exit_two() {
    let out = run(&["gates", "--data", "/nonexistent/x.csv", "--k", "2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gates", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "usage");
}

#[test]
fn indivisible_groups_need_trim() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(
        dir.path(),
        "ten.csv",
        "y,t,score\n1,1,1\n2,0,2\n3,1,3\n4,0,4\n5,1,5\n6,0,6\n7,1,7\n8,0,8\n9,1,9\n10,0,10\n",
    );
    let p = data.to_str().unwrap();
    let out = run(&["gates", "--data", p, "--k", "2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "divisibility");
    let out = run(&["gates", "--data", p, "--k", "2", "--seed", "1", "--trim", "--n-mc", "1000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["n"], 8);
    assert_eq!(v["dropped_rows"].as_array().unwrap().len(), 2);
}

#[test]
fn crossfit_runs_and_rejects_indivisible_folds() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path(), 200);
    let p = data.to_str().unwrap();
    let out = run(&["crossfit", "--data", p, "--k", "2", "--folds", "2", "--seed", "4", "--n-mc", "1000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["per_fold"].as_array().unwrap().len(), 2);
    assert_eq!(v["tau"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["trainer"]["kind"], "linear_t_learner");

    let out = run(&["crossfit", "--data", p, "--k", "2", "--folds", "3", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "divisibility");
}

#[cfg(unix)]
#[test]
fn external_trainer_matches_precomputed_scores() {
    use std::os::unix::fs::PermissionsExt;

    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path(), 200);
    // Score is the first covariate of the evaluation rows.
    let stub = dir.path().join("stub.sh");
    let mut f = std::fs::File::create(&stub).unwrap();
    writeln!(
        f,
        "#!/bin/sh\nwhile [ $# -gt 0 ]; do case $1 in --eval) e=$2;; --out) o=$2;; esac; shift; done\n\
         awk -F, 'NR==1{{for(i=1;i<=NF;i++) if($i==\"x1\") c=i; print \"score\"; next}} {{print $c}}' \"$e\" > \"$o\""
    )
    .unwrap();
    drop(f);
    std::fs::set_permissions(&stub, std::fs::Permissions::from_mode(0o755)).unwrap();

    let p = data.to_str().unwrap();
    let common = ["--data", p, "--k", "2", "--folds", "2", "--seed", "11", "--n-mc", "1000"];
    let mut ext = vec!["crossfit", "--trainer-cmd", stub.to_str().unwrap(), "--x-cols", "x1,x2"];
    ext.extend(common);
    let mut pre = vec!["crossfit", "--trainer", "precomputed", "--score-col", "x1"];
    pre.extend(common);
    let a = run(&ext);
    let b = run(&pre);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let (a, b) = (json(&a), json(&b));
    let tb: Vec<f64> = b["tau"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_close(&a["tau"], &tb, 1e-9);
    let vb: Vec<f64> = b["groups"].as_array().unwrap().iter().map(|g| g["variance"].as_f64().unwrap()).collect();
    let va: Vec<f64> = a["groups"].as_array().unwrap().iter().map(|g| g["variance"].as_f64().unwrap()).collect();
    for (x, y) in va.iter().zip(&vb) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
    }
}

#[test]
fn failing_trainer_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path(), 200);
    let out = run(&[
        "crossfit",
        "--data",
        data.to_str().unwrap(),
        "--trainer-cmd",
        "sh -c 'echo broken >&2; exit 1' --",
        "--k",
        "2",
        "--folds",
        "2",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["error"]["kind"], "trainer");
    assert!(v["error"]["message"].as_str().unwrap().contains("broken"));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("groups.csv");
    let args = [
        "simulate", "--trials", "50", "--n", "100", "--k", "5", "--seed", "7", "--truth-draws", "100000",
        "--rank-draws", "1000",
    ];
    let mut with_csv = args.to_vec();
    with_csv.extend(["--csv", csv.to_str().unwrap()]);
    let a = run(&with_csv);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let v = json(&a);
    let groups = v["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 5);
    for g in groups {
        let c = g["coverage"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn simulate_rejects_zero_trials() {
    let out = run(&["simulate", "--trials", "0", "--n", "100", "--k", "5", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn standalone_tests() {
    let out = run(&["het-test", "--tau", "1,1", "--ate", "0", "--sigma", "1,0;0,1"]);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["test"]["statistic"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((v["test"]["p_value"].as_f64().unwrap() - (-1.0f64).exp()).abs() < 1e-12);

    let out = run(&["rank-test", "--tau", "2,1", "--ate", "0", "--sigma", "1,0;0,1", "--n-mc", "20000", "--seed", "5"]);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["test"]["statistic"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let p = v["test"]["p_value"].as_f64().unwrap();
    let se = v["test"]["mc_std_error"].as_f64().unwrap();
    assert!((p - 0.2398).abs() < 4.0 * se);

    let out = run(&["het-test", "--tau", "1,1", "--ate", "0", "--sigma", "1,0,0;0,1,0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bias_bound_reports_probability() {
    let out = run(&["bias-bound", "--n", "100", "--k", "5", "--group", "2", "--epsilon", "0.5", "--m-k", "1", "--m-km1", "1"]);
    assert!(out.status.success());
    let b = json(&out)["bound"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&b));
    let out = run(&["bias-bound", "--n", "100", "--k", "5", "--group", "6", "--epsilon", "0.5", "--m-k", "1", "--m-km1", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_and_version_succeed() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
}
