use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

fn lats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lats")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn traces_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path().display().to_string())
        .filter(|p| p.ends_with(".trace.jsonl"))
        .collect();
    v.sort();
    v
}

#[test]
fn perfect_oracle_solves_the_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = lats(&["run", "--env", "game24", "--backend", "oracle:p=1.0", "--n", "5", "--k", "30", "--seed", "7", "--out", out, "--workers", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["success_rate"], 1.0);
    assert_eq!(report["tasks"], 50);
    assert_eq!(traces_in(dir.path()).len(), 50);
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("g24-001.tree.jsonl").exists());
}

#[test]
fn variants_give_comparable_reports() {
    let mut ids = Vec::new();
    for variant in ["lats", "best_of_k"] {
        let dir = tempfile::tempdir().unwrap();
        let o = lats(&[
            "run", "--env", "game24", "--backend", "oracle:p=0.3,acc=0.8", "--k", "5", "--seed", "3", "--limit", "6",
            "--variant", variant, "--out", dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let r = read_json(&dir.path().join("report.json"));
        let tasks: Vec<String> = r["per_task"].as_array().unwrap().iter().map(|t| t["task_id"].to_string()).collect();
        ids.push(tasks);
    }
    assert_eq!(ids[0], ids[1]);
    assert_eq!(ids[0].len(), 6);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# suite\nenv = game24\nbackend = oracle:p=1.0\nlimit = 2\nk = 1\nlog_prompts = true\n").unwrap();
    let out = dir.path().join("out");
    let o = lats(&["run", "--config", cfg.to_str().unwrap(), "--k", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("g24-001.trace.jsonl")).unwrap();
    let header: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["k"], 3);
    assert_eq!(header["config"]["lambda"], 0.5);
    assert_eq!(header["config"]["log_prompts"], true);
    assert!(trace.contains("\"text\""), "full prompt text expected");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "env game24\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--env", "game24", "--backend", "oracle:p=1", "--tasks", "/nonexistent/tasks.json", "--out", out],
        vec!["run", "--config", bad.to_str().unwrap(), "--out", out],
        vec!["run", "--env", "game24", "--backend", "oracle:p=1", "--set", "colour=red", "--out", out],
        vec!["run", "--env", "game24", "--backend", "oracle:p=1", "--variant", "dfs_prune", "--value-mode", "none", "--out", out],
        vec!["run", "--env", "docqa", "--backend", "oracle:p=1", "--out", out],
        vec!["run", "--env", "game24", "--backend", "oracle:p=1", "--lambda", "2", "--out", out],
    ];
    for args in cases {
        let o = lats(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

fn small_run(dir: &Path) -> String {
    let o = lats(&[
        "run", "--env", "game24", "--backend", "oracle:p=0.4,acc=0.7", "--k", "6", "--limit", "3", "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("g24-001.trace.jsonl").display().to_string()
}

#[test]
fn replay_passes_then_catches_a_perturbed_value() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_run(dir.path());
    let o = lats(&["replay", &trace]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS"));

    let dump = dir.path().join("g24-001.tree.jsonl");
    let text = fs::read_to_string(&dump).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut node: Value = serde_json::from_str(&lines[2]).unwrap();
    node["V"] = json!(node["V"].as_f64().unwrap() + 0.25);
    lines[2] = node.to_string();
    fs::write(&dump, lines.join("\n") + "\n").unwrap();
    let o = lats(&["replay", &trace]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("node 2"), "{}", stdout(&o));
}

#[test]
fn replay_reports_first_bad_seq_of_a_truncated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_run(dir.path());
    let text = fs::read_to_string(&trace).unwrap();
    let cut = &text[..text.len() - 40];
    fs::write(&trace, cut).unwrap();
    let o = lats(&["replay", &trace]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL"));
}

#[test]
fn report_matches_recomputation_from_rows() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let traces = traces_in(dir.path());
    assert_eq!(traces.len(), 3);
    let json_out = dir.path().join("agg.json");
    let csv_out = dir.path().join("agg.csv");
    let mut args = vec!["report", "--out", json_out.to_str().unwrap(), "--csv", csv_out.to_str().unwrap()];
    args.extend(traces.iter().map(String::as_str));
    let o = lats(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let r = read_json(&json_out);
    let rows = r["per_task"].as_array().unwrap();
    let n = rows.len() as f64;
    let wins: Vec<&Value> = rows.iter().filter(|t| t["success"] == true).collect();
    let success = wins.len() as f64 / n;
    let reward = rows.iter().map(|t| t["best_reward"].as_f64().unwrap()).sum::<f64>() / n;
    let nodes = if wins.is_empty() {
        0.0
    } else {
        wins.iter().map(|t| t["nodes_expanded"].as_f64().unwrap()).sum::<f64>() / wins.len() as f64
    };
    let proposals = rows.iter().map(|t| t["proposals"].as_f64().unwrap()).sum::<f64>() / n;
    assert!((r["success_rate"].as_f64().unwrap() - success).abs() < 1e-12);
    assert!((r["avg_reward"].as_f64().unwrap() - reward).abs() < 1e-12);
    assert!((r["avg_nodes_on_success"].as_f64().unwrap() - nodes).abs() < 1e-12);
    assert!((r["avg_backend_calls"]["proposals"].as_f64().unwrap() - proposals).abs() < 1e-12);

    let mut reader = csv::Reader::from_path(&csv_out).unwrap();
    assert_eq!(reader.records().count(), 3);
}

#[test]
fn report_rejects_foreign_engine_versions() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_run(dir.path());
    let text = fs::read_to_string(&trace).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    let mut header: Value = serde_json::from_str(head).unwrap();
    header["engine_version"] = json!("lats-9.9.9");
    let other = dir.path().join("other.jsonl");
    fs::write(&other, format!("{header}\n{rest}")).unwrap();
    let o = lats(&["report", &trace, other.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn oracle24_lists_solutions() {
    let o = lats(&["oracle24", "1", "1", "1", "1"]);
    assert_eq!(stdout(&o).trim(), "no solution");
    let o = lats(&["oracle24", "--json", "4", "7", "8", "8"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["solvable"], true);
    assert!(v["solutions"].as_array().unwrap().len() > 1);
}

/// Answers every chat request with the same completion; counts requests.
fn chat_server(content: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let req: Value = serde_json::from_slice(&buf).unwrap();
            let n = req["n"].as_u64().unwrap_or(1);
            let choices: Vec<Value> = (0..n).map(|_| json!({"message": {"role": "assistant", "content": content}})).collect();
            let body = json!({ "choices": choices }).to_string();
            counter.fetch_add(1, Ordering::SeqCst);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, hits)
}

#[test]
fn cached_http_run_repeats_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let (url, hits) = chat_server("Finish[nobody]\nThus the correctness score is 5");
    let go = |endpoint: &str, out: &str| {
        let spec = format!("http:endpoint={endpoint},model=m,cache={},retry_ms=1", cache.display());
        let out = dir.path().join(out);
        let o = lats(&["run", "--env", "docqa", "--backend", &spec, "--k", "3", "--limit", "1", "--out", out.to_str().unwrap()]);
        (o, out)
    };
    let (o, first) = go(&url, "a");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(hits.load(Ordering::SeqCst) > 0);

    // nothing listens here; every call must come from the cache
    let (o, second) = go("http://127.0.0.1:9/v1/chat/completions", "b");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read_to_string(first.join("dq-001.trace.jsonl")).unwrap();
    let b = fs::read_to_string(second.join("dq-001.trace.jsonl")).unwrap();
    assert_eq!(a, b);
    assert!(lats(&["replay", second.join("dq-001.trace.jsonl").to_str().unwrap()]).status.success());
}

#[test]
fn unreachable_http_backend_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = lats(&[
        "run", "--env", "docqa", "--backend", "http:endpoint=http://127.0.0.1:9/v1/chat/completions,model=m,retry_ms=1",
        "--limit", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
}
