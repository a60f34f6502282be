use std::path::Path;
use std::process::{Command, Output};

fn dlmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmp")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_reports_fixture_structure() {
    let o = dlmp(&["validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("price dimension 56"), "{text}");
    assert!(text.contains("aggregator 13"), "{text}");
    assert!(text.contains("valid"));
}

#[test]
fn check_compares_price_tables() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "bus,t,y_p,y_q\n1,0,0.5,0.1\n2,0,0.25,0.0\n").unwrap();
    std::fs::write(&b, "bus,t,y_p,y_q\n2,0,0.26,0.0\n1,0,0.5,0.1\n").unwrap();
    let pass = dlmp(&["check", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "0.02"]);
    assert_eq!(pass.status.code(), Some(0), "{}", stdout(&pass));
    let fail = dlmp(&["check", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "0.001"]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(stdout(&fail).contains("FAIL"));
}

#[test]
fn short_run_writes_artifacts_and_fails_its_targets() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    std::fs::write(&scenario, r#"{"iterations": 1, "oracle_kkt": 1.0}"#).unwrap();
    let out = dir.path().join("out");
    let o = dlmp(&["run", scenario.to_str().unwrap(), "--out", out.to_str().unwrap(), "--sequential"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["trace.csv", "dlmp.csv", "messages.jsonl", "report.json", "report.txt"] {
        assert!(Path::new(&out).join(name).is_file(), "{name} missing");
    }
}

#[test]
fn bad_inputs_exit_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    std::fs::write(&scenario, r#"{"iterations": 10, "learning_rate": 3}"#).unwrap();
    let o = dlmp(&["run", scenario.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let missing = dlmp(&["validate", "--instance", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let neg = dlmp(&["run", "--sigma", "-1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(neg.status.code(), Some(2));
}
