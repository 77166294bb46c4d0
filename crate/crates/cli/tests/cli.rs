use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn qkdrelay(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdrelay")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sim_prints_rate_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = qkdrelay(tmp.path(), &["sim", "epb_table1", "--seed", "3", "--duration", "300", "--out", "a"]);
    let b = qkdrelay(tmp.path(), &["sim", "epb_table1", "--seed", "3", "--duration", "300", "--out", "b"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("keys/s"));
    assert!(stdout(&a).contains("SKR bps"));
    for f in ["report.json", "summary.txt", "telemetry.lp", "scenario.toml"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(b.status.success());
}

#[test]
fn missing_scenario_file_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["sim", "nowhere/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/run.toml"));
}

#[test]
fn invalid_scenario_lists_errors() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "name = \"x\"\nbogus = 1\n").unwrap();
    let o = qkdrelay(tmp.path(), &["sim", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("duration_s"), "{err}");
}

#[test]
fn unknown_flag_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["sim", "epb_table1", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qkdrelay(tmp.path(), &["sim", "epb_table1", "--compress", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn audit_clean_then_injected_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["sim", "epb_table1", "--duration", "250", "--out", "run"]);
    assert!(o.status.success());
    let o = qkdrelay(tmp.path(), &["audit", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("audit clean"));

    let log = tmp.path().join("run/usage/TN1.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let first = text.lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    let mut f = fs::OpenOptions::new().append(true).open(&log).unwrap();
    writeln!(f, "{first}").unwrap();
    let o = qkdrelay(tmp.path(), &["audit", "run"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert!(out.contains(&format!("key {} used 2 times", v["key_id"])), "{out}");

    writeln!(f, "{{not json").unwrap();
    let o = qkdrelay(tmp.path(), &["audit", "run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tampered_run_audits_clean_with_shortfall() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["sim", "tamper_hop", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("failed in transfer 2"));
    let o = qkdrelay(tmp.path(), &["audit", "run"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("lost to detected faults 2"));
}

#[test]
fn audit_of_missing_dir_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["audit", "absent"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_writes_csv_and_lines() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(qkdrelay(tmp.path(), &["sim", "epb_table1", "--duration", "60", "--out", "run"]).status.success());
    let o = qkdrelay(tmp.path(), &["export", "run", "--out", "csv", "--measurement", "link"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> =
        fs::read_dir(tmp.path().join("csv")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["link-link=1.csv", "link-link=2.csv", "link-link=3.csv"]);
    let csv = fs::read_to_string(tmp.path().join("csv/link-link=1.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("qber_pct"));
    // one cycle every 2 s from t = 1
    assert_eq!(csv.lines().count(), 1 + 30);

    let o = qkdrelay(tmp.path(), &["export", "run", "--out", "lp", "--format", "lp"]);
    assert!(o.status.success());
    let lp = fs::read_to_string(tmp.path().join("lp/telemetry.lp")).unwrap();
    assert_eq!(lp.lines().count(), fs::read_to_string(tmp.path().join("run/telemetry.lp")).unwrap().lines().count());
}

#[test]
fn scenario_init_writes_node_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qkdrelay(tmp.path(), &["scenario-init", "epb_table1", "--out", "net", "--compress", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for n in ["NM", "TN1", "TN2", "EN"] {
        let text = fs::read_to_string(tmp.path().join(format!("net/node-{n}.toml"))).unwrap();
        assert!(text.contains("scenario = \"net/scenario.toml\""));
    }
    let sc = fs::read_to_string(tmp.path().join("net/scenario.toml")).unwrap();
    assert!(sc.contains("time_compression = 20"));
    let o = qkdrelay(tmp.path(), &["scenario-init", "--list", "--out", "x"]);
    assert!(stdout(&o).contains("epb_day2_wind"));
}

#[test]
fn lone_network_manager_idles_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(qkdrelay(tmp.path(), &["scenario-init", "--out", "net", "--duration", "30", "--compress", "15"]).status.success());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = tmp.path().join("net/node-NM.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("127.0.0.1:7400", &format!("127.0.0.1:{port}"));
    fs::write(&cfg, text).unwrap();
    let o = qkdrelay(tmp.path(), &["node", "--config", "net/node-NM.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("net/out/report-NM.json")).unwrap()).unwrap();
    assert_eq!(report["triggers"].as_array().unwrap().len(), 0);
    assert_eq!(report["nk_records"], 0);
    let lp = fs::read_to_string(tmp.path().join("net/out/telemetry/NM.lp")).unwrap();
    assert!(lp.lines().filter(|l| l.starts_with("network_keys,")).count() >= 25);
    assert!(lp.lines().any(|l| l.starts_with("pool,link=1,node=NM")));
}

#[test]
fn node_with_bad_config_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("n.toml"), "role = \"tn\"\n").unwrap();
    let o = qkdrelay(tmp.path(), &["node", "--config", "n.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("listen_addr"));
    let o = qkdrelay(tmp.path(), &["node", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(1));
}
