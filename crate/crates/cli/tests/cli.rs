use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "model": {"depth": 4, "hidden": 16, "heads": 4, "mlp_ratio": 2, "tokens": 1},
  "federation": {"clients": 4, "mu": 0.5, "t_clk": 0.5, "rounds": 12, "tau_max": 3, "eval_every": 4},
  "clients": [
    {"r_depth": 0.75, "r_width": 0.75, "speed": 0.01, "comm_latency": 0.1},
    {"r_depth": 0.5, "r_width": 0.5, "speed": 0.2, "comm_latency": 0.1},
    {"r_depth": 0.25, "r_width": 0.25, "speed": 0.03, "comm_latency": 0.1},
    {"r_depth": 0.5, "r_width": 0.75, "speed": 0.1, "comm_latency": 0.1}
  ],
  "train": {"epochs": 1, "epochs_hat": 1, "q_hat": 3},
  "data": {"dim": 8, "classes": 4, "n": 15, "test_per_class": 5, "seed": 3}
}"#;

fn cos2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cos2p"))
        .args(args)
        .env_remove("COS2P_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self) -> PathBuf {
        let out = self.path("run");
        let o = cos2p(&["run", "-c", s(&self.path("cfg.json")), "-o", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }

    fn replay(&self, events: &Path, run: &Path) -> Output {
        cos2p(&[
            "replay",
            "-e",
            s(events),
            "-c",
            s(&self.path("cfg.json")),
            "-s",
            s(&run.join("summary.json")),
        ])
    }
}

fn read_events(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_events(path: &Path, events: &[Value]) {
    let text: String = events.iter().map(|e| format!("{}\n", e)).collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn run_writes_every_output() {
    let fx = Fixture::new();
    let out = fx.run();
    for f in ["metrics.csv", "events.jsonl", "final.ckpt", "summary.json", "masks.json", "config.json"] {
        assert!(out.join(f).is_file(), "{} missing", f);
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,sim_time,server_top1,server_top5,server_f1,client_top1,client_top5,client_f1,ru_running,tau_max,n_star_running,keep_ratio_mean"
    );
    assert_eq!(lines.count(), 12);
}

#[test]
fn rejected_configs_exit_with_one() {
    let fx = Fixture::new();
    let bad = fx.path("bad.json");
    std::fs::write(&bad, r#"{"federation": {"mu": 1.5}}"#).unwrap();
    let o = cos2p(&["run", "-c", s(&bad), "-o", s(&fx.path("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("federation.mu"), "{}", stderr(&o));

    std::fs::write(&bad, "{\n  \"federation\": {\"clientz\": 3}\n}").unwrap();
    let o = cos2p(&["run", "-c", s(&bad), "-o", s(&fx.path("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_files_exit_with_two() {
    let fx = Fixture::new();
    let o = cos2p(&["run", "-c", s(&fx.path("nope.json")), "-o", s(&fx.path("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&cos2p(&[])), 1);
    assert_eq!(code(&cos2p(&["frobnicate"])), 1);
    assert_eq!(code(&cos2p(&["--help"])), 0);
    assert_eq!(code(&cos2p(&["--version"])), 0);
}

#[test]
fn replay_of_an_untouched_log_is_clean() {
    let fx = Fixture::new();
    let run = fx.run();
    let o = fx.replay(&run.join("events.jsonl"), &run);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rounds"], 12);
    assert_eq!(report["diffs"].as_array().unwrap().len(), 0);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(report["resource_utilization"], summary["resource_utilization"]);
}

#[test]
fn replay_flags_an_arrival_moved_past_the_deadline() {
    let fx = Fixture::new();
    let run = fx.run();
    let mut events = read_events(&run.join("events.jsonl"));
    let need = 2;
    // find a round closed by its timer with more than a quorum of
    // arrivals and push its last arrival past the deadline
    let mut arrivals: Vec<usize> = Vec::new();
    let mut target = None;
    for (i, e) in events.iter().enumerate() {
        match e["kind"].as_str().unwrap() {
            "update_arrival" => arrivals.push(i),
            "timer" if arrivals.len() > need => {
                target = Some((*arrivals.last().unwrap(), e["t"].as_f64().unwrap()));
                break;
            }
            "aggregate" => arrivals.clear(),
            _ => {}
        }
    }
    let (idx, deadline) = target.expect("a timer-closed round with late joiners");
    events[idx]["t"] = Value::from(deadline + 0.25);
    let edited = fx.path("edited.jsonl");
    write_events(&edited, &events);
    let o = fx.replay(&edited, &run);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("admission"), "{}", stderr(&o));
}

#[test]
fn replay_flags_shifted_round_tags() {
    let fx = Fixture::new();
    let run = fx.run();
    let mut events = read_events(&run.join("events.jsonl"));
    for e in events.iter_mut().filter(|e| e["kind"] == "update_arrival") {
        let r = e["round"].as_u64().unwrap();
        e["round"] = Value::from(r + 1);
    }
    let edited = fx.path("shifted.jsonl");
    write_events(&edited, &events);
    let o = fx.replay(&edited, &run);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn replay_rejects_a_truncated_log() {
    let fx = Fixture::new();
    let run = fx.run();
    let mut events = read_events(&run.join("events.jsonl"));
    events.pop();
    let cut = fx.path("cut.jsonl");
    write_events(&cut, &events);
    let o = fx.replay(&cut, &run);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn evaluate_on_the_partitioned_server_set_matches_the_summary() {
    let fx = Fixture::new();
    let run = fx.run();
    let part = fx.path("part");
    let o = cos2p(&["partition", "-c", s(&fx.path("cfg.json")), "-o", s(&part)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for n in 0..4 {
        let idx: Value =
            serde_json::from_str(&std::fs::read_to_string(part.join(format!("client_{:03}.json", n))).unwrap()).unwrap();
        let shard = idx["shard"].as_array().unwrap().len();
        let split = idx["train"].as_array().unwrap().len() + idx["test"].as_array().unwrap().len();
        assert_eq!(shard, split);
    }
    let o = cos2p(&["evaluate", "-m", s(&run.join("final.ckpt")), "-d", s(&part.join("server_test"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: Value = serde_json::from_slice(&o.stdout).unwrap();
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(metrics, summary["server"]);

    let o = cos2p(&["evaluate", "-m", s(&run.join("final.ckpt")), "-d", s(&part.join("pool"))]);
    assert_eq!(code(&o), 0);
}

#[test]
fn inspect_mask_reports_every_layer() {
    let fx = Fixture::new();
    let run = fx.run();
    let o = cos2p(&["inspect-mask", "-m", s(&run.join("masks.json")), "--bins", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4 * 4 * 3);
    for l in &lines {
        let hist: u64 = l["histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(hist, l["segments"].as_u64().unwrap());
    }
}

#[test]
fn seed_variable_overrides_the_config() {
    let fx = Fixture::new();
    let base = fx.run();
    let out = fx.path("seeded");
    let o = Command::new(env!("CARGO_BIN_EXE_cos2p"))
        .args(["run", "-c", s(&fx.path("cfg.json")), "-o", s(&out)])
        .env("COS2P_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = std::fs::read(base.join("events.jsonl")).unwrap();
    let b = std::fs::read(out.join("events.jsonl")).unwrap();
    assert_ne!(a, b);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);
}
