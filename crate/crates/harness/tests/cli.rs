use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkdn"))
}

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

#[test]
fn run_then_trace_check() {
    let out = tempfile::tempdir().unwrap();
    let st = bin()
        .args([
            "run",
            "--scenario",
            "POLICY_AUDIT",
            "--exchanges",
            "3",
            "--config",
        ])
        .arg(reference())
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    for f in [
        "metrics.json",
        "metrics.csv",
        "trace.jsonl",
        "alarms.csv",
        "telemetry.csv",
        "channels.json",
        "audit.json",
    ] {
        assert!(out.path().join(f).exists(), "{f} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["succeeded"], 3);

    let check = bin().arg("trace-check").arg(out.path()).output().unwrap();
    let text = String::from_utf8_lossy(&check.stdout);
    assert!(check.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}

#[test]
fn validate_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        "{\n  \"name\": \"x\",\n  \"seed\": \"not a number\"\n}\n",
    )
    .unwrap();
    let st = bin()
        .args(["validate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
    let text = String::from_utf8_lossy(&st.stdout);
    assert!(
        text.contains("CONFIG_INVALID") && text.contains("line 3:"),
        "{text}"
    );

    let ok = bin()
        .args(["validate", "--config"])
        .arg(reference())
        .output()
        .unwrap();
    assert!(ok.status.success());
}
