use std::fs;
use std::net::TcpListener;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use qkd_relay::audit::audit_dir;
use qkd_relay::simharness::now_ms;

const NAMES: [&str; 4] = ["NM", "TN1", "TN2", "EN"];

fn spawn(dir: &std::path::Path, node: &str, epoch: u64) -> Child {
    Command::new(env!("CARGO_BIN_EXE_qkdrelay"))
        .current_dir(dir)
        .args(["node", "--config", &format!("net/node-{node}.toml"), "--epoch-ms", &epoch.to_string()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

// Virtual 250 s at 10x. Triggers fall at 119 and 199 s; TN1 is killed at
// about 150 s and back at about 165 s, between the two batches.
#[test]
fn killed_trusted_node_resumes_without_key_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let st = Command::new(env!("CARGO_BIN_EXE_qkdrelay"))
        .current_dir(dir)
        .args(["scenario-init", "--out", "net", "--duration", "250", "--compress", "10", "--seed", "21"])
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    let listeners: Vec<TcpListener> = (0..4).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let ports: Vec<u16> = listeners.iter().map(|l| l.local_addr().unwrap().port()).collect();
    drop(listeners);
    for n in NAMES {
        let p = dir.join(format!("net/node-{n}.toml"));
        let mut text = fs::read_to_string(&p).unwrap();
        for (i, port) in ports.iter().enumerate() {
            text = text.replace(&format!("127.0.0.1:{}", 7400 + i), &format!("127.0.0.1:#{port}"));
        }
        fs::write(&p, text.replace('#', "")).unwrap();
    }

    let epoch = now_ms() + 500;
    let mut others: Vec<(&str, Child)> = ["NM", "TN2", "EN"].iter().map(|n| (*n, spawn(dir, n, epoch))).collect();
    let mut tn1 = spawn(dir, "TN1", epoch);
    thread::sleep(Duration::from_millis(epoch + 15_000 - now_ms()));
    tn1.kill().unwrap();
    tn1.wait().unwrap();
    thread::sleep(Duration::from_millis(1_500));
    others.push(("TN1", spawn(dir, "TN1", epoch)));
    for (n, c) in others {
        let out = c.wait_with_output().unwrap();
        assert!(out.status.success(), "{n}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let read = |n: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.join(format!("net/out/report-{n}.json"))).unwrap()).unwrap()
    };
    let nm = read("NM");
    let tn1 = read("TN1");
    assert_eq!(tn1["resumed"], true);
    let outcomes = nm["outcomes"].as_array().unwrap();
    assert_eq!(outcomes.len(), 2, "{nm}");
    assert!(outcomes.iter().all(|o| o["missing"] == 0));
    for n in NAMES {
        assert_eq!(read(n)["nk_set_digest"], nm["nk_set_digest"], "{n}");
    }
    let audit = audit_dir(&dir.join("net/out")).unwrap();
    assert!(audit.is_clean(), "{audit:?}");
    assert_eq!(audit.usage_events, 2 * 40 * 6);
}
