//! `lats`: run tree search over task suites, replay traces, aggregate reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lats_core::env::game24::game24_oracle;
use lats_core::env::{bundled_suite, load_tasks, EnvKind, TaskSpec};
use lats_core::policy::{HttpChatBackend, HttpChatConfig, Oracle24Backend, Oracle24Valuer, PolicyBackend, ScriptedBackend};
use lats_core::search::{run, Backends, SearchConfig, SearchResult, Templates};
use lats_core::trace::{replay, verify_against_dump, RunReport, RunRow, TraceOp};

#[derive(Parser)]
#[command(name = "lats", version, about = "Monte Carlo tree search over language-agent trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search every task in a suite and write traces, tree dumps and a report.
    Run(RunArgs),
    /// Rebuild a tree from its trace and check it against the dump.
    Replay {
        trace: PathBuf,
        /// Tree dump to verify; defaults to the `.tree.jsonl` next to the trace.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Aggregate traces into one report.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Write the report JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve a game of 24 exhaustively.
    Oracle24 {
        #[arg(num_args = 4, required = true, allow_negative_numbers = true)]
        numbers: Vec<i64>,
        #[arg(long)]
        json: bool,
    },
}

/// Every option is also a config-file key (dashes become underscores).
#[derive(Args, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// game24, docqa, shop or solution.
    #[arg(long)]
    env: Option<String>,
    /// Task file; defaults to the bundled suite for the environment.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// oracle:p=P[,acc=A] | scripted:FILE | http:endpoint=URL,model=M[,key_env=VAR,cache=DIR,...]
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    value_backend: Option<String>,
    #[arg(long)]
    reflection_backend: Option<String>,
    /// Directory of `<env>_{act,value,reflect}.txt` templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run only the first N tasks.
    #[arg(long)]
    limit: Option<usize>,

    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    depth_limit: Option<String>,
    #[arg(long)]
    w: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    value_mode: Option<String>,
    #[arg(long)]
    reflection_enabled: Option<String>,
    #[arg(long)]
    skip_simulation: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    prune_threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    reflection_cap: Option<String>,
    #[arg(long)]
    max_proposals: Option<String>,
    #[arg(long)]
    prompt_style: Option<String>,
    #[arg(long)]
    state_restore: Option<String>,
    #[arg(long)]
    agent_trajectories: Option<String>,
    /// Keep full prompt text in traces instead of hashes.
    #[arg(long)]
    log_prompts: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn flag_overrides(&self) -> Vec<(&'static str, String)> {
        let fields: [(&'static str, &Option<String>); 16] = [
            ("env", &self.env),
            ("backend", &self.backend),
            ("value_backend", &self.value_backend),
            ("reflection_backend", &self.reflection_backend),
            ("n", &self.n),
            ("k", &self.k),
            ("depth_limit", &self.depth_limit),
            ("w", &self.w),
            ("lambda", &self.lambda),
            ("value_mode", &self.value_mode),
            ("reflection_enabled", &self.reflection_enabled),
            ("skip_simulation", &self.skip_simulation),
            ("variant", &self.variant),
            ("prune_threshold", &self.prune_threshold),
            ("seed", &self.seed),
            ("reflection_cap", &self.reflection_cap),
        ];
        let mut out: Vec<(&'static str, String)> =
            fields.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect();
        let more: [(&'static str, &Option<String>); 4] = [
            ("max_proposals", &self.max_proposals),
            ("prompt_style", &self.prompt_style),
            ("state_restore", &self.state_restore),
            ("agent_trajectories", &self.agent_trajectories),
        ];
        out.extend(more.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))));
        let paths = [("tasks", &self.tasks), ("templates", &self.templates), ("out", &self.out)];
        out.extend(paths.into_iter().filter_map(|(k, v)| v.as_ref().map(|p| (k, p.display().to_string()))));
        if let Some(w) = self.workers {
            out.push(("workers", w.to_string()));
        }
        if let Some(l) = self.limit {
            out.push(("limit", l.to_string()));
        }
        if self.log_prompts {
            out.push(("log_prompts", "true".into()));
        }
        out
    }
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Parses `key = value` lines; `#` starts a comment.
fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

const RUN_KEYS: [&str; 10] = [
    "env",
    "tasks",
    "backend",
    "value_backend",
    "reflection_backend",
    "templates",
    "out",
    "workers",
    "limit",
    "api_key_env",
];

/// Fully resolved `run` settings.
struct RunSettings {
    kind: EnvKind,
    tasks: PathBuf,
    backend: String,
    value_backend: Option<String>,
    reflection_backend: Option<String>,
    templates: Option<PathBuf>,
    out: PathBuf,
    workers: usize,
    limit: Option<usize>,
    api_key_env: Option<String>,
    search: SearchConfig,
}

/// Turns a text value into JSON matching the type of the default field.
fn coerce(key: &str, value: &str, like: &serde_json::Value) -> Result<serde_json::Value> {
    use serde_json::Value;
    let bad = || config_err(format!("bad value for {key}: {value:?}"));
    let v = value.trim();
    Ok(match like {
        Value::Bool(_) => Value::Bool(match v.to_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => true,
            "false" | "no" | "off" | "0" => false,
            _ => return Err(bad()),
        }),
        Value::Number(n) if n.is_u64() && key != "w" && key != "lambda" && key != "prune_threshold" => {
            Value::from(v.parse::<u64>().map_err(|_| bad())?)
        }
        Value::Number(_) => serde_json::Number::from_f64(v.parse::<f64>().map_err(|_| bad())?)
            .map(Value::Number)
            .ok_or_else(bad)?,
        // Option<usize> fields default to null
        Value::Null => match v.to_lowercase().as_str() {
            "" | "none" | "null" => Value::Null,
            _ => Value::from(v.parse::<u64>().map_err(|_| bad())?),
        },
        _ => Value::String(v.replace('-', "_").to_lowercase()),
    })
}

fn resolve(args: &RunArgs) -> Result<RunSettings> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        pairs.extend(parse_flat_config(&text)?);
    }
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    pairs.extend(args.flag_overrides().into_iter().map(|(k, v)| (k.to_string(), v)));
    let map: BTreeMap<String, String> = pairs.into_iter().collect();

    let env_name = map.get("env").ok_or_else(|| config_err("no environment given (env = game24|docqa|shop|solution)"))?;
    let kind = EnvKind::parse(env_name).ok_or_else(|| config_err(format!("unknown environment {env_name:?}")))?;

    let mut search = serde_json::to_value(SearchConfig::for_env(kind)).expect("config serializes");
    let fields = search.as_object_mut().expect("config is an object");
    for (k, v) in &map {
        if RUN_KEYS.contains(&k.as_str()) {
            continue;
        }
        let like = fields.get(k).ok_or_else(|| config_err(format!("unknown config key {k:?}")))?;
        let value = coerce(k, v, like)?;
        fields.insert(k.clone(), value);
    }
    let search: SearchConfig =
        serde_json::from_value(search).map_err(|e| config_err(format!("invalid search settings: {e}")))?;
    search.validate().map_err(|e| config_err(e.to_string()))?;

    let number = |key: &str| -> Result<Option<usize>> {
        map.get(key)
            .map(|v| v.parse::<usize>().map_err(|_| config_err(format!("bad value for {key}: {v:?}"))))
            .transpose()
    };
    Ok(RunSettings {
        kind,
        tasks: map.get("tasks").map(PathBuf::from).unwrap_or_else(|| bundled_suite(kind)),
        backend: map.get("backend").cloned().ok_or_else(|| config_err("no backend given"))?,
        value_backend: map.get("value_backend").cloned(),
        reflection_backend: map.get("reflection_backend").cloned(),
        templates: map.get("templates").map(PathBuf::from),
        out: map.get("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
        workers: number("workers")?.unwrap_or(1).max(1),
        limit: number("limit")?,
        api_key_env: map.get("api_key_env").cloned(),
        search,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Policy,
    Value,
    Reflection,
}

fn kv_options(body: &str) -> Result<BTreeMap<String, String>> {
    body.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            part.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| config_err(format!("backend option {part:?} is not key=value")))
        })
        .collect()
}

fn unit_option(opts: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    let v = match opts.get(key) {
        Some(v) => v.parse::<f64>().map_err(|_| config_err(format!("bad {key}: {v:?}")))?,
        None => default,
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(config_err(format!("{key} must lie in [0, 1]")));
    }
    Ok(v)
}

fn build_backend(spec: &str, role: Role, kind: EnvKind, api_key_env: Option<&str>) -> Result<Box<dyn PolicyBackend>> {
    let (scheme, body) = spec.split_once(':').unwrap_or((spec, ""));
    match scheme {
        "oracle" => {
            if kind != EnvKind::Game24 {
                return Err(config_err("the oracle backend only supports game24"));
            }
            let opts = kv_options(body)?;
            Ok(match role {
                Role::Policy => Box::new(Oracle24Backend::new(unit_option(&opts, "p", 1.0)?)),
                _ => Box::new(Oracle24Valuer::new(unit_option(&opts, "acc", 1.0)?)),
            })
        }
        "scripted" => {
            let text = fs::read_to_string(body).map_err(|e| config_err(format!("cannot read script {body}: {e}")))?;
            let b = ScriptedBackend::from_json(&text).map_err(|e| config_err(format!("bad script {body}: {e}")))?;
            Ok(Box::new(b))
        }
        "http" => {
            let opts = kv_options(body)?;
            let get = |k: &str| opts.get(k).cloned();
            let endpoint = get("endpoint").ok_or_else(|| config_err("http backend needs endpoint=URL"))?;
            let model = get("model").ok_or_else(|| config_err("http backend needs model=NAME"))?;
            let mut cfg = HttpChatConfig::new(endpoint, model);
            cfg.api_key_env = get("key_env").or_else(|| api_key_env.map(String::from));
            cfg.cache_dir = get("cache").map(PathBuf::from);
            if let Some(t) = get("temperature") {
                cfg.temperature = t.parse().map_err(|_| config_err(format!("bad temperature {t:?}")))?;
            }
            if let Some(m) = get("max_tokens") {
                cfg.max_tokens = Some(m.parse().map_err(|_| config_err(format!("bad max_tokens {m:?}")))?);
            }
            if let Some(t) = get("timeout") {
                cfg.timeout_secs = t.parse().map_err(|_| config_err(format!("bad timeout {t:?}")))?;
            }
            if let Some(r) = get("retry_ms") {
                cfg.retry_base_ms = r.parse().map_err(|_| config_err(format!("bad retry_ms {r:?}")))?;
            }
            Ok(Box::new(HttpChatBackend::new(cfg)))
        }
        other => Err(config_err(format!("unknown backend kind {other:?}"))),
    }
}

fn row(task: &TaskSpec, r: &SearchResult) -> RunRow {
    RunRow {
        task_id: task.task_id.clone(),
        success: r.success,
        best_reward: r.best_reward,
        episodes_used: r.episodes_used,
        nodes_expanded: r.nodes_expanded,
        policy_calls: r.backend_calls.policy_calls,
        proposals: r.backend_calls.proposals,
        value_calls: r.backend_calls.value_calls,
        reflection_calls: r.backend_calls.reflection_calls,
    }
}

/// Every policy call failed: the backend never answered.
fn backend_unreachable(r: &SearchResult) -> Option<String> {
    if r.backend_calls.proposals > 0 {
        return None;
    }
    r.trace.iter().find_map(|e| match &e.op {
        TraceOp::Expand { error: Some(err), .. } => Some(err.clone()),
        _ => None,
    })
}

fn write_report(report: &RunReport, json: Option<&Path>, csv_path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match json {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        for r in &report.per_task {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let s = resolve(args)?;
    let mut tasks = load_tasks(&s.tasks).map_err(|e| config_err(format!("{}: {e}", s.tasks.display())))?;
    if let Some(l) = s.limit {
        tasks.truncate(l);
    }
    if tasks.is_empty() {
        return Err(config_err("task file holds no tasks"));
    }
    if let Some(bad) = tasks.iter().find(|t| t.kind() != s.kind) {
        return Err(config_err(format!("task {} is not a {} task", bad.task_id, s.kind.name())));
    }
    let templates = match &s.templates {
        Some(dir) => Templates::load(dir, s.kind).map_err(|e| config_err(e.to_string()))?,
        None => Templates::bundled(s.kind),
    };
    let key_env = s.api_key_env.as_deref();
    let policy = build_backend(&s.backend, Role::Policy, s.kind, key_env)?;
    let value = build_backend(s.value_backend.as_deref().unwrap_or(&s.backend), Role::Value, s.kind, key_env)?;
    let reflection = build_backend(
        s.reflection_backend.as_deref().unwrap_or(&s.backend),
        Role::Reflection,
        s.kind,
        key_env,
    )?;
    let backends = Backends {
        policy: policy.as_ref(),
        value: value.as_ref(),
        reflection: reflection.as_ref(),
    };
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.workers).build()?;
    let results: Vec<Result<RunRow>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let r = run(task, backends, &templates, &s.search).map_err(|e| anyhow!("{}: {e}", task.task_id))?;
                if let Some(err) = backend_unreachable(&r) {
                    return Err(config_err(format!("{}: backend unreachable: {err}", task.task_id)));
                }
                let base = s.out.join(&task.task_id);
                let with = |ext: &str| PathBuf::from(format!("{}.{ext}", base.display()));
                fs::write(with("trace.jsonl"), r.trace_jsonl())?;
                fs::write(with("tree.jsonl"), r.tree.dump_jsonl())?;
                if !r.reflections.is_empty() {
                    fs::write(with("reflections.jsonl"), r.reflections.to_jsonl())?;
                }
                eprintln!(
                    "{}: {} reward {:.3} after {} episodes",
                    task.task_id,
                    if r.success { "solved" } else { "failed" },
                    r.best_reward,
                    r.episodes_used
                );
                Ok(row(task, &r))
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = RunReport::from_rows(rows);
    write_report(&report, Some(&s.out.join("report.json")), Some(&s.out.join("report.csv")))?;
    println!(
        "{} tasks, success rate {:.3}, mean reward {:.3}; outputs in {}",
        report.tasks,
        report.success_rate,
        report.avg_reward,
        s.out.display()
    );
    Ok(())
}

fn default_dump(trace: &Path) -> PathBuf {
    let name = trace.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".trace.jsonl").unwrap_or(&name);
    trace.with_file_name(format!("{stem}.tree.jsonl"))
}

/// Returns whether the trace verified.
fn cmd_replay(trace: &Path, dump: Option<&Path>) -> Result<bool> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let rebuilt = match replay(&text) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL {}: {e}", trace.display());
            return Ok(false);
        }
    };
    let dump_path = dump.map(Path::to_path_buf).unwrap_or_else(|| default_dump(trace));
    let dump_text = fs::read_to_string(&dump_path).with_context(|| format!("reading {}", dump_path.display()))?;
    if let Err(e) = verify_against_dump(&rebuilt.tree, &dump_text) {
        println!("FAIL {}: {e}", trace.display());
        return Ok(false);
    }
    println!(
        "PASS {}: {} nodes from {} events match {}",
        trace.display(),
        rebuilt.tree.len(),
        rebuilt.events.len(),
        dump_path.display()
    );
    Ok(true)
}

fn cmd_report(traces: &[PathBuf], out: Option<&Path>, csv_path: Option<&Path>) -> Result<()> {
    let texts = traces
        .iter()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport::from_traces(texts.iter().map(String::as_str))?;
    write_report(&report, out, csv_path)
}

fn cmd_oracle24(numbers: &[i64], json: bool) -> Result<()> {
    let r = game24_oracle(numbers);
    let lines: Vec<Vec<String>> = r
        .solutions
        .iter()
        .map(|s| s.iter().map(|step| step.to_action().raw).collect())
        .collect();
    if json {
        let v = serde_json::json!({ "numbers": numbers, "solvable": r.solvable, "solutions": lines });
        println!("{v}");
    } else if !r.solvable {
        println!("no solution");
    } else {
        for line in lines {
            println!("{}", line.join(" ; "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|_| true),
        Command::Replay { trace, dump } => cmd_replay(trace, dump.as_deref()),
        Command::Report { traces, out, csv } => cmd_report(traces, out.as_deref(), csv.as_deref()).map(|_| true),
        Command::Oracle24 { numbers, json } => cmd_oracle24(numbers, *json).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
