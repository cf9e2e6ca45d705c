use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn data(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel).display().to_string()
}

fn probekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probekit")).args(args).output().expect("spawn probekit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn sim_backend() -> String {
    format!("sim:{}", data("data/topology.toml"))
}

#[test]
fn trace_prints_one_line_per_hop() {
    let o = probekit(&["trace", "--backend", &sim_backend()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[2]["labels"].as_array().unwrap().len(), 2);
    assert_eq!(lines[4]["reply_kind"], "timeout");
    assert_eq!(lines[5]["responder"], "1.1.1.1");
}

#[test]
fn trace_csv_has_header_and_rows() {
    let o = probekit(&["--format", "csv", "trace", "--backend", &sim_backend(), "--max-ttl", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().nth(3).unwrap().contains("24001/0/0/1;16/0/1/1"), "{out}");
}

#[test]
fn trace_usage_errors() {
    assert_eq!(probekit(&["trace", "--backend", "sim:/no/such/file.toml"]).status.code(), Some(2));
    assert_eq!(probekit(&["trace", "--backend", "carrier-pigeon"]).status.code(), Some(2));
    assert_eq!(probekit(&["trace", "--backend", &sim_backend(), "--max-ttl", "0"]).status.code(), Some(2));
    assert_eq!(probekit(&["trace", "--backend", &sim_backend(), "not-an-ip"]).status.code(), Some(2));
    assert_eq!(probekit(&["trace", "--help"]).status.code(), Some(0));
    assert_eq!(probekit(&[]).status.code(), Some(2));
}

#[test]
fn raw_backend_is_a_runtime_failure() {
    let o = probekit(&["trace", "--backend", "raw", "192.0.2.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn campaign_and_bundle_round_trip() {
    let dir = TempDir::new().unwrap();
    let bundle = dir.path().join("campaign.jsonl").display().to_string();
    let schedule = write(dir.path(), "s.conf", "every 1s x 60 docker 1.1.1.1\n");
    let o = probekit(&[
        "--out",
        &bundle,
        "controller",
        "run",
        "--nodes",
        &data("data/nodes.conf"),
        "--schedule",
        &schedule,
        "--policy",
        "discard",
        "--executor",
        &format!("sim:{}", data("profiles/campaign.toml")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["events"], 60);
    assert_eq!(summary["completed"], 15);

    let again = probekit(&["report", &bundle]);
    assert_eq!(again.status.code(), Some(0));
    let resummary: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(resummary, summary);

    // flip one record from completed to discarded: summary no longer matches
    let text = std::fs::read_to_string(&bundle).unwrap();
    let tampered = text.replacen("\"completed\"", "\"discarded\"", 1);
    assert_ne!(tampered, text);
    let bad = write(dir.path(), "bad.jsonl", &tampered);
    assert_eq!(probekit(&["report", &bad]).status.code(), Some(1));

    let garbage = write(dir.path(), "garbage.jsonl", "{not json\n");
    assert_eq!(probekit(&["report", &garbage]).status.code(), Some(2));
    assert_eq!(probekit(&["report", "/no/such/bundle"]).status.code(), Some(2));
}

#[test]
fn controller_usage_errors() {
    let dir = TempDir::new().unwrap();
    let schedule = write(dir.path(), "s.conf", "0 utnt 1.1.1.1\n");
    let exec = format!("sim:{}", data("profiles/campaign.toml"));
    let nodes = data("data/nodes.conf");
    let base = ["controller", "run", "--nodes", &nodes, "--schedule", &schedule, "--executor", &exec];
    let mut bad_policy = base.to_vec();
    bad_policy.extend(["--policy", "sometimes"]);
    assert_eq!(probekit(&bad_policy).status.code(), Some(2));

    let decreasing = write(dir.path(), "d.conf", "5 utnt a\n1 utnt b\n");
    let o = probekit(&[
        "controller", "run", "--nodes", &nodes, "--schedule", &decreasing, "--executor", &exec, "--policy", "wait",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let no_nodes = write(dir.path(), "n.conf", "# nobody\n");
    let o = probekit(&[
        "controller", "run", "--nodes", &no_nodes, "--schedule", &schedule, "--executor", &exec, "--policy", "wait",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_schedule_gives_empty_report() {
    let dir = TempDir::new().unwrap();
    let schedule = write(dir.path(), "s.conf", "# nothing planned\n");
    let bundle = dir.path().join("b.jsonl").display().to_string();
    let o = probekit(&[
        "--out",
        &bundle,
        "controller",
        "run",
        "--nodes",
        &data("data/nodes.conf"),
        "--schedule",
        &schedule,
        "--policy",
        "wait",
        "--executor",
        &format!("sim:{}", data("profiles/campaign.toml")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["events"], 0);

    let csv = probekit(&["--format", "csv", "report", &bundle]);
    assert_eq!(csv.status.code(), Some(0));
    let out = stdout(&csv);
    assert_eq!(out.lines().count(), 1, "expected only a header: {out}");
    assert!(out.starts_with("event_index,"));
}

#[test]
fn sim_memory_reports_counts_and_ratios() {
    let o = probekit(&["sim", "memory", "--profiles", &data("profiles/default.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let counts: Vec<u64> = v["counts"].as_array().unwrap().iter().map(|c| c["instance_count"].as_u64().unwrap()).collect();
    assert_eq!(counts, [128, 17, 4]);
    assert!(v["ratios"].as_array().unwrap().iter().any(|r| r["ratio"].as_f64() == Some(32.0)));
}

#[test]
fn sim_cpu_with_profile_filter_and_timeline() {
    let dir = TempDir::new().unwrap();
    let timeline = dir.path().join("t.csv");
    let o = probekit(&[
        "sim",
        "cpu",
        "--profiles",
        &data("profiles/default.toml"),
        "--profile",
        "docker",
        "--timeline",
        &timeline.display().to_string(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["counts"][0]["instance_count"], 26);
    let csv = std::fs::read_to_string(timeline).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn sim_usage_errors() {
    let profiles = data("profiles/default.toml");
    assert_eq!(probekit(&["sim", "memory", "--profiles", &profiles, "--profile", "qemu"]).status.code(), Some(2));
    assert_eq!(probekit(&["sim", "memory", "--profiles", &profiles, "--budget-mb", "-1"]).status.code(), Some(2));
    assert_eq!(probekit(&["sim", "memory", "--profiles", &profiles, "--ksm", "fast"]).status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let zero = write(
        dir.path(),
        "zero.toml",
        "[[profile]]\nname = \"idle\"\nimage_size_mb = 1\ndeploy_time_s = 1\nboot_exec_time_s = 1\n\
         mem_peak_mb = 1\nmem_steady_mb = 1\nshareable_page_fraction = 0\npage_volatility = 0\ncpu_demand_cores = 0\n",
    );
    assert_eq!(probekit(&["sim", "cpu", "--profiles", &zero]).status.code(), Some(2));
}
