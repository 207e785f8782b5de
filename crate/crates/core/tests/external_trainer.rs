#![cfg(unix)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gates_core::crossfit::score_via_external;
use gates_core::data::Covariates;
use gates_core::{run_crossfit, ExperimentDataset, TrainerSpec};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

const ARGS: &str = "while [ $# -gt 0 ]; do case $1 in --eval) e=$2;; --out) o=$2;; --train) tr=$2;; --seed) s=$2;; esac; shift; done";

fn dataset(n: usize) -> ExperimentDataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.5 - 3.0, ((i * 7) % 5) as f64]).collect();
    let t = (0..n).map(|i| i % 2 == 0).collect();
    let y = (0..n).map(|i| (i % 3) as f64 + rows[i][0]).collect();
    let x = Covariates::from_rows(vec!["a".into(), "b".into()], &rows).unwrap();
    ExperimentDataset::new(y, t, None, Some(x)).unwrap()
}

fn first_column(dir: &Path) -> PathBuf {
    script(dir, "ident.sh", &format!("{ARGS}\nawk -F, 'NR==1{{print \"score\"; next}} {{print $1}}' \"$e\" > \"$o\""))
}

#[test]
fn identity_stub_returns_first_covariate() {
    let dir = tempfile::tempdir().unwrap();
    let stub = first_column(dir.path());
    let d = dataset(12);
    let s = score_via_external(stub.to_str().unwrap(), &[], Duration::from_secs(30), &d, &d, 5).unwrap();
    assert_eq!(s, d.covariates().unwrap().column(0));
}

#[test]
fn protocol_files_and_seed_are_passed() {
    let dir = tempfile::tempdir().unwrap();
    // Scores are the seed when the training file has the expected header.
    let stub = script(
        dir.path(),
        "seed.sh",
        &format!(
            "{ARGS}\nhead -n1 \"$tr\" | grep -qx 'y,t,a,b' || exit 9\n\
             awk -F, -v s=\"$s\" 'NR==1{{print \"score\"; next}} {{print s}}' \"$e\" > \"$o\""
        ),
    );
    let d = dataset(8);
    let s = score_via_external(stub.to_str().unwrap(), &[], Duration::from_secs(30), &d, &d, 42).unwrap();
    assert_eq!(s, vec![42.0; 8]);
}

#[test]
fn crossfit_with_identity_stub_matches_covariate_rule() {
    let dir = tempfile::tempdir().unwrap();
    let stub = first_column(dir.path());
    let d = dataset(40);
    let ext = TrainerSpec::External {
        program: stub.to_str().unwrap().into(),
        args: vec![],
        timeout_secs: 30,
    };
    let a = run_crossfit(&d, &ext, 2, 2, 3).unwrap();
    let b = run_crossfit(&d, &TrainerSpec::Covariate { column: "a".into() }, 2, 2, 3).unwrap();
    assert_eq!(a.pooled_tau, b.pooled_tau);
}

#[test]
fn nonzero_exit_carries_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let stub = script(dir.path(), "fail.sh", "echo 'model exploded' >&2\nexit 1");
    let d = dataset(8);
    let e = score_via_external(stub.to_str().unwrap(), &[], Duration::from_secs(30), &d, &d, 1).unwrap_err();
    assert!(e.to_string().contains("model exploded"), "{e}");
}

#[test]
fn short_output_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stub = script(
        dir.path(),
        "short.sh",
        &format!("{ARGS}\nawk -F, 'NR==1{{print \"score\"; next}} NR>2{{print $1}}' \"$e\" > \"$o\""),
    );
    let d = dataset(8);
    let e = score_via_external(stub.to_str().unwrap(), &[], Duration::from_secs(30), &d, &d, 1).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains('7') && msg.contains('8'), "{msg}");
}

#[test]
fn wrong_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stub = script(dir.path(), "hdr.sh", &format!("{ARGS}\nprintf 'pred\\n1\\n' > \"$o\""));
    let d = dataset(2);
    let e = score_via_external(stub.to_str().unwrap(), &[], Duration::from_secs(30), &d, &d, 1).unwrap_err();
    assert!(e.to_string().contains("score"));
}

#[test]
fn slow_trainer_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let stub = script(dir.path(), "slow.sh", "exec sleep 30");
    let d = dataset(8);
    let start = std::time::Instant::now();
    let e = score_via_external(stub.to_str().unwrap(), &[], Duration::from_millis(300), &d, &d, 1).unwrap_err();
    assert!(e.to_string().contains("timed out"), "{e}");
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn failure_inside_crossfit_names_the_fold() {
    let dir = tempfile::tempdir().unwrap();
    let stub = script(dir.path(), "fail.sh", "exit 3");
    let spec = TrainerSpec::External {
        program: stub.to_str().unwrap().into(),
        args: vec![],
        timeout_secs: 30,
    };
    let e = run_crossfit(&dataset(40), &spec, 2, 2, 1).unwrap_err();
    assert!(e.to_string().contains("fold"), "{e}");
}
