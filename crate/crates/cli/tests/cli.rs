use std::process::{Command, Output};

fn qcka(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcka"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("qcka runs")
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

#[test]
fn asym_sweep_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = qcka(&["asym-sweep", "--grid", "0:350:10"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# qcka "));
    assert!(text.contains("# params_sha256: "));
    assert_eq!(data_rows(&text).len(), 36);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        qcka(&["optimize-p", "--p-z", "1.5"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qcka(&["asym-sweep", "--grid", ""], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qcka(&["asym-sweep", "--grid", "0:10:0"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qcka(
            &["asym-sweep", "--variable", "q", "--grid", "1"],
            dir.path()
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        qcka(&["asym-sweep", "--n", "13"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        qcka(&["no-such-command"], dir.path()).status.code(),
        Some(2)
    );
    let aborted = qcka(
        &["finite-sweep", "--L", "1e3", "--grid", "0:100:50"],
        dir.path(),
    );
    assert_eq!(aborted.status.code(), Some(3));
    let rows = String::from_utf8(aborted.stdout).unwrap();
    assert!(data_rows(&rows).iter().all(|r| r.ends_with(",1")));
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"protocol": {"n": 4, "arm_km": 30.0}, "device": {"p_d": 1e-7}}"#,
    )
    .unwrap();
    let out = qcka(
        &["bounds", "--config", "cfg.json", "--arm-km", "12"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(r#""n":4"#));
    assert!(text.contains(r#""p_d":1e-7"#));
    let row = data_rows(&text)[0];
    assert!(row.starts_with("1.20000e1,4,"), "{row}");

    std::fs::write(&path, r#"{"protocol": {"users": 4}}"#).unwrap();
    assert_eq!(
        qcka(&["bounds", "--config", "cfg.json"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_writes_ledger_summary_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = qcka(
        &[
            "simulate",
            "--arm-km",
            "25",
            "--rounds",
            "300",
            "--seed",
            "9",
            "--out",
            "run.csv",
            "--keys-out",
            "keys.hex",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ledger = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(ledger.contains("# seed: 9"));
    assert!(ledger.contains("z_accepted,"));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run.summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["key"]["tags_agree"], true);
    for key in ["Q_Z", "E_X"] {
        let z = summary["z_scores"][key].as_f64().unwrap();
        assert!(z.abs() <= 3.0, "{key}: z = {z}");
    }
    let keys = std::fs::read_to_string(dir.path().join("keys.hex")).unwrap();
    let lines: Vec<&str> = keys.lines().filter(|l| l.starts_with('A')).collect();
    assert_eq!(lines.len(), 3);
    let hex: Vec<&str> = lines.iter().map(|l| l.split(' ').nth(1).unwrap()).collect();
    assert!(hex.iter().all(|h| *h == hex[0]));
    let length = summary["key"]["key_length"].as_u64().unwrap();
    assert!(keys.starts_with(&format!("# length_bits: {length}\n")));
}

#[test]
fn table_and_optimize() {
    let dir = tempfile::tempdir().unwrap();
    let out = qcka(&["table"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("3.41250e-9") && text.contains("3.09940e-9") && text.contains("2.33840e-10")
    );

    let out = qcka(&["optimize-p"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = data_rows(&text)[0].split(',').collect();
    let p: f64 = row[3].parse().unwrap();
    assert!(p > 0.5 && p < 1.0);
}
