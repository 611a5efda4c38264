//! JSONL event traces: recording, replay into a tree, verification against a
//! tree dump, and aggregate reports.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::ActionSample;
use crate::reflection::{make_record, Reflection, ReflectionStore};
use crate::search::{BackendCalls, SearchConfig, StopReason};
use crate::tree::{ChildSpec, NodeDump, NodeId, SearchTree, TreeError};
use crate::valuation::ValueScore;

pub const ENGINE_VERSION: &str = concat!("lats-", env!("CARGO_PKG_VERSION"));

/// Replay tolerance for values.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub engine_version: String,
    pub task_id: String,
    pub env: String,
    pub input: String,
    pub config: SearchConfig,
}

/// A prompt as recorded: always its hash, the text only when asked for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRef {
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl PromptRef {
    pub fn new(prompt: &str, keep_text: bool) -> Self {
        let digest = Sha256::digest(prompt.as_bytes());
        Self {
            hash: hex::encode(&digest[..8]),
            text: keep_text.then(|| prompt.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub id: NodeId,
    pub action: ActionSample,
    pub observation: String,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TraceOp {
    /// `node_ids` is the selected root-to-leaf path.
    Select { w: f64 },
    /// `node_ids` are the new children. A failed backend call leaves
    /// `children` empty and sets `error`.
    Expand {
        parent: NodeId,
        prompt: PromptRef,
        children: Vec<ChildRecord>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    /// `node_ids` are the scored children; `scores` align with them.
    Evaluate {
        scores: Vec<ValueScore>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        prompts: Vec<PromptRef>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        flagged: Vec<NodeId>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        errors: Vec<String>,
    },
    /// `node_ids` is `[from, to]`.
    SimulateStep,
    /// `node_ids` is the updated path; `values`/`visits` are post-update.
    Backprop {
        reward: f64,
        values: Vec<f64>,
        visits: Vec<u32>,
    },
    /// `node_ids` is `[failed terminal]`.
    Reflect {
        reward: f64,
        reflection: String,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        flagged: bool,
        prompt: PromptRef,
    },
    /// `node_ids` is `[best node]`.
    Terminate {
        success: bool,
        best_reward: f64,
        episodes_used: usize,
        nodes_expanded: usize,
        backend_calls: BackendCalls,
        reason: StopReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub episode: usize,
    pub node_ids: Vec<NodeId>,
    #[serde(flatten)]
    pub op: TraceOp,
}

/// Event buffer owned by one run.
#[derive(Debug, Clone, Default)]
pub struct Tracer {
    events: Vec<TraceEvent>,
    log_prompts: bool,
}

impl Tracer {
    pub fn new(log_prompts: bool) -> Self {
        Self {
            events: Vec::new(),
            log_prompts,
        }
    }

    pub fn prompt(&self, text: &str) -> PromptRef {
        PromptRef::new(text, self.log_prompts)
    }

    pub fn emit(&mut self, episode: usize, node_ids: Vec<NodeId>, op: TraceOp) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            episode,
            node_ids,
            op,
        });
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

/// Header line followed by one line per event.
pub fn to_jsonl(header: &TraceHeader, events: &[TraceEvent]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("empty trace")]
    Empty,
    #[error("bad trace header: {0}")]
    Header(String),
    #[error("trace from engine {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error("seq {seq}: {message}")]
    BadEvent { seq: u64, message: String },
    #[error("node {node}: {message}")]
    NodeMismatch { node: usize, message: String },
    #[error("tree dump line {line}: {message}")]
    BadDump { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub header: TraceHeader,
    pub tree: SearchTree,
    pub reflections: ReflectionStore,
    pub events: Vec<TraceEvent>,
    pub summary: Option<RunRow>,
}

fn bad(seq: u64, message: impl Into<String>) -> ReplayError {
    ReplayError::BadEvent {
        seq,
        message: message.into(),
    }
}

fn tree_err(seq: u64) -> impl Fn(TreeError) -> ReplayError {
    move |e| bad(seq, e.to_string())
}

pub fn parse_header(line: &str) -> Result<TraceHeader, ReplayError> {
    let header: TraceHeader = serde_json::from_str(line).map_err(|e| ReplayError::Header(e.to_string()))?;
    if header.engine_version != ENGINE_VERSION {
        return Err(ReplayError::Version {
            found: header.engine_version,
            expected: ENGINE_VERSION.into(),
        });
    }
    Ok(header)
}

/// Rebuilds the tree and reflection store from events alone, checking each
/// backpropagation against the values it recorded.
pub fn replay(text: &str) -> Result<Replayed, ReplayError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = parse_header(lines.next().ok_or(ReplayError::Empty)?)?;
    let mut tree = SearchTree::new(header.input.clone());
    let mut store = ReflectionStore::new();
    let mut events = Vec::new();
    let mut summary = None;
    let mut expected_seq = 0u64;

    for line in lines {
        let ev: TraceEvent = serde_json::from_str(line).map_err(|e| bad(expected_seq, format!("unparseable event: {e}")))?;
        let seq = ev.seq;
        if seq != expected_seq {
            return Err(bad(expected_seq, format!("found seq {seq}")));
        }
        expected_seq += 1;
        if summary.is_some() {
            return Err(bad(seq, "event after terminate"));
        }
        for &id in &ev.node_ids {
            if id.0 >= tree.len() && !matches!(ev.op, TraceOp::Expand { .. }) {
                return Err(bad(seq, format!("unknown node {}", id.0)));
            }
        }
        match &ev.op {
            TraceOp::Select { .. } | TraceOp::SimulateStep => {}
            TraceOp::Expand { parent, children, .. } => {
                let specs = children
                    .iter()
                    .map(|c| ChildSpec {
                        action: c.action.clone(),
                        observation: c.observation.clone(),
                        is_terminal: c.terminal,
                        reward: c.reward,
                    })
                    .collect();
                let ids = tree.add_children(*parent, specs).map_err(tree_err(seq))?;
                let recorded: Vec<NodeId> = children.iter().map(|c| c.id).collect();
                if ids != recorded || ids != ev.node_ids {
                    return Err(bad(seq, "child ids do not match the arena"));
                }
                for c in children.iter().filter(|c| c.closed) {
                    tree.node_mut(c.id).map_err(tree_err(seq))?.closed = true;
                }
            }
            TraceOp::Evaluate { scores, .. } => {
                if scores.len() != ev.node_ids.len() {
                    return Err(bad(seq, "score count differs from node count"));
                }
                for (&id, s) in ev.node_ids.iter().zip(scores) {
                    tree.node_mut(id).map_err(tree_err(seq))?.eval_score = Some(s.clone());
                }
            }
            TraceOp::Backprop { reward, values, visits } => {
                let leaf = *ev.node_ids.last().ok_or_else(|| bad(seq, "backprop without nodes"))?;
                let path = tree.path_to(leaf).map_err(tree_err(seq))?;
                if path != ev.node_ids {
                    return Err(bad(seq, "backprop path is not root-to-leaf"));
                }
                tree.backpropagate(leaf, *reward).map_err(tree_err(seq))?;
                if values.len() != path.len() || visits.len() != path.len() {
                    return Err(bad(seq, "backprop stats length mismatch"));
                }
                for ((&id, &v), &n) in path.iter().zip(values).zip(visits) {
                    let node = tree.node(id).map_err(tree_err(seq))?;
                    if (node.value - v).abs() > TOLERANCE || node.visits != n {
                        return Err(bad(
                            seq,
                            format!(
                                "node {} recorded V={v} N={n}, replay gives V={} N={}",
                                id.0, node.value, node.visits
                            ),
                        ));
                    }
                }
            }
            TraceOp::Reflect {
                reward,
                reflection,
                flagged,
                ..
            } => {
                let id = ev.node_ids[0];
                let ctx = tree.reconstruct_context(id, &[]).map_err(tree_err(seq))?;
                let r = Reflection {
                    text: reflection.clone(),
                    prompt: String::new(),
                    flagged: *flagged,
                };
                store.record(make_record(&header.task_id, &ctx, *reward, &r, ev.episode));
            }
            TraceOp::Terminate {
                success,
                best_reward,
                episodes_used,
                nodes_expanded,
                backend_calls,
                ..
            } => {
                if *nodes_expanded != tree.len() - 1 {
                    return Err(bad(
                        seq,
                        format!("terminate claims {nodes_expanded} nodes, replay has {}", tree.len() - 1),
                    ));
                }
                summary = Some(RunRow {
                    task_id: header.task_id.clone(),
                    success: *success,
                    best_reward: *best_reward,
                    episodes_used: *episodes_used,
                    nodes_expanded: *nodes_expanded,
                    policy_calls: backend_calls.policy_calls,
                    proposals: backend_calls.proposals,
                    value_calls: backend_calls.value_calls,
                    reflection_calls: backend_calls.reflection_calls,
                });
            }
        }
        events.push(ev);
    }
    Ok(Replayed {
        header,
        tree,
        reflections: store,
        events,
        summary,
    })
}

/// Compares a replayed tree node-for-node with a tree dump.
pub fn verify_against_dump(tree: &SearchTree, dump: &str) -> Result<(), ReplayError> {
    let rows: Vec<NodeDump> = dump
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReplayError::BadDump {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    for (i, row) in rows.iter().enumerate() {
        let Ok(node) = tree.node(NodeId(i)) else {
            return Err(ReplayError::NodeMismatch {
                node: row.id.0,
                message: "missing from replayed tree".into(),
            });
        };
        let expect = NodeDump::from(node);
        let mismatch = |message: String| ReplayError::NodeMismatch { node: i, message };
        if row.id != expect.id || row.parent != expect.parent || row.action != expect.action {
            return Err(mismatch("structure differs".into()));
        }
        if (row.value - expect.value).abs() > TOLERANCE {
            return Err(mismatch(format!("V {} vs replayed {}", row.value, expect.value)));
        }
        if row.visits != expect.visits {
            return Err(mismatch(format!("N {} vs replayed {}", row.visits, expect.visits)));
        }
        if row.terminal != expect.terminal || row.reward != expect.reward {
            return Err(mismatch("terminal status differs".into()));
        }
    }
    if rows.len() != tree.len() {
        return Err(ReplayError::NodeMismatch {
            node: rows.len(),
            message: format!("dump has {} nodes, replay has {}", rows.len(), tree.len()),
        });
    }
    Ok(())
}

/// One task's outcome as reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub task_id: String,
    pub success: bool,
    pub best_reward: f64,
    pub episodes_used: usize,
    pub nodes_expanded: usize,
    pub policy_calls: usize,
    pub proposals: usize,
    pub value_calls: usize,
    pub reflection_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgCalls {
    pub policy: f64,
    pub proposals: f64,
    pub value: f64,
    pub reflection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub engine_version: String,
    pub tasks: usize,
    pub success_rate: f64,
    pub avg_reward: f64,
    /// Mean nodes created, over successful runs only; 0 when none succeeded.
    pub avg_nodes_on_success: f64,
    pub avg_backend_calls: AvgCalls,
    pub per_task: Vec<RunRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl RunReport {
    pub fn from_rows(rows: Vec<RunRow>) -> Self {
        let f = |g: fn(&RunRow) -> usize| mean(rows.iter().map(|r| g(r) as f64));
        Self {
            engine_version: ENGINE_VERSION.into(),
            tasks: rows.len(),
            success_rate: mean(rows.iter().map(|r| if r.success { 1.0 } else { 0.0 })),
            avg_reward: mean(rows.iter().map(|r| r.best_reward)),
            avg_nodes_on_success: mean(rows.iter().filter(|r| r.success).map(|r| r.nodes_expanded as f64)),
            avg_backend_calls: AvgCalls {
                policy: f(|r| r.policy_calls),
                proposals: f(|r| r.proposals),
                value: f(|r| r.value_calls),
                reflection: f(|r| r.reflection_calls),
            },
            per_task: rows,
        }
    }

    /// Aggregates trace texts; every trace must come from this engine and
    /// end with a terminate event.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a str>) -> Result<Self, ReplayError> {
        let mut rows = Vec::new();
        for text in traces {
            let r = replay(text)?;
            let seq = r.events.len() as u64;
            rows.push(r.summary.ok_or_else(|| bad(seq, "trace has no terminate event"))?);
        }
        Ok(Self::from_rows(rows))
    }
}
