//! The search loop: selection, expansion, evaluation, simulation,
//! backpropagation and reflection, plus the DFS and sampling baselines.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{make_env, EnvError, EnvKind, EnvSnapshot, Environment, TaskSpec, INVALID_ACTION};
use crate::policy::{
    assemble_acting_prompt, assemble_reasoning_prompt, parse_action, ActionGrammar, ActionSample, PolicyBackend,
    PromptBundle, TemplateError,
};
use crate::reflection::{generate_reflection, inject, is_success, make_record, ReflectionStore};
use crate::trace::{ChildRecord, TraceEvent, TraceHeader, TraceOp, Tracer, ENGINE_VERSION};
use crate::tree::{ChildSpec, NodeId, SearchTree, StateContext, TreeError};
use crate::valuation::{evaluate_children, Evaluator, ValueMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lats,
    DfsPrune,
    BestOfK,
    GreedyReact,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "lats" => Some(Self::Lats),
            "dfs_prune" | "dfs" => Some(Self::DfsPrune),
            "best_of_k" => Some(Self::BestOfK),
            "greedy_react" | "reflexion" => Some(Self::GreedyReact),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Thought/Action/Observation lines.
    Acting,
    /// Numbered thoughts ending in a final answer.
    Reasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRestore {
    /// Step a fresh environment along the node's action path.
    Replay,
    /// Restore a snapshot taken when the node was created.
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n: usize,
    pub k: usize,
    pub depth_limit: usize,
    pub w: f64,
    pub lambda: f64,
    pub value_mode: ValueMode,
    pub reflection_enabled: bool,
    pub skip_simulation: bool,
    pub variant: Variant,
    pub prune_threshold: f64,
    pub seed: u64,
    /// Most recent reflections injected into prompts.
    pub reflection_cap: usize,
    /// Hard cap on policy proposals across the run.
    pub max_proposals: Option<usize>,
    pub prompt_style: PromptStyle,
    pub state_restore: StateRestore,
    /// Also inject failed trajectories into agent prompts, not just value
    /// prompts.
    pub agent_trajectories: bool,
    pub log_prompts: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n: 5,
            k: 50,
            depth_limit: 7,
            w: 1.0,
            lambda: 0.5,
            value_mode: ValueMode::Full,
            reflection_enabled: true,
            skip_simulation: false,
            variant: Variant::Lats,
            prune_threshold: 0.5,
            seed: 0,
            reflection_cap: 4,
            max_proposals: None,
            prompt_style: PromptStyle::Acting,
            state_restore: StateRestore::Replay,
            agent_trajectories: false,
            log_prompts: false,
        }
    }
}

impl SearchConfig {
    /// Defaults with the environment's mixing weight, depth limit and
    /// simulation mode.
    pub fn for_env(kind: EnvKind) -> Self {
        Self {
            lambda: kind.default_lambda(),
            depth_limit: kind.default_depth_limit(),
            skip_simulation: kind.default_skip_simulation(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let fail = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.n == 0 || self.k == 0 || self.depth_limit == 0 {
            return fail("n, k and depth_limit must be positive");
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return fail("w must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.variant == Variant::DfsPrune && self.value_mode == ValueMode::None {
            return fail("dfs_prune needs a value function (value_mode full or sc_only)");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("template {name}: {source}")]
    Template {
        name: String,
        #[source]
        source: TemplateError,
    },
    #[error("template file {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Backend calls made by one run, per role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCalls {
    pub policy_calls: usize,
    /// Completions received from the policy backend.
    pub proposals: usize,
    pub value_calls: usize,
    pub reflection_calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    /// Episode (or expansion) budget used up.
    Budget,
    /// The proposal cap was reached.
    ProposalCap,
    /// Nothing left to explore.
    Exhausted,
}

/// Agent, value and reflection prompt templates for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub acting: PromptBundle,
    pub value: PromptBundle,
    pub reflection: PromptBundle,
}

fn bundled_text(kind: EnvKind) -> [(&'static str, &'static str); 3] {
    match kind {
        EnvKind::Game24 => [
            ("game24_act", include_str!("../templates/game24_act.txt")),
            ("game24_value", include_str!("../templates/game24_value.txt")),
            ("game24_reflect", include_str!("../templates/game24_reflect.txt")),
        ],
        EnvKind::Docqa => [
            ("docqa_act", include_str!("../templates/docqa_act.txt")),
            ("docqa_value", include_str!("../templates/docqa_value.txt")),
            ("docqa_reflect", include_str!("../templates/docqa_reflect.txt")),
        ],
        EnvKind::Shop => [
            ("shop_act", include_str!("../templates/shop_act.txt")),
            ("shop_value", include_str!("../templates/shop_value.txt")),
            ("shop_reflect", include_str!("../templates/shop_reflect.txt")),
        ],
        EnvKind::Solution => [
            ("solution_act", include_str!("../templates/solution_act.txt")),
            ("solution_value", include_str!("../templates/solution_value.txt")),
            ("solution_reflect", include_str!("../templates/solution_reflect.txt")),
        ],
    }
}

impl Templates {
    fn parse(parts: [(String, String); 3]) -> Result<Self, SearchError> {
        let mut out = parts.into_iter().map(|(name, text)| {
            PromptBundle::from_template_str(&text).map_err(|source| SearchError::Template { name, source })
        });
        Ok(Self {
            acting: out.next().expect("three parts")?,
            value: out.next().expect("three parts")?,
            reflection: out.next().expect("three parts")?,
        })
    }

    pub fn bundled(kind: EnvKind) -> Self {
        Self::parse(bundled_text(kind).map(|(n, t)| (n.to_string(), t.to_string()))).expect("bundled templates parse")
    }

    /// Reads `<kind>_act.txt`, `<kind>_value.txt` and `<kind>_reflect.txt`
    /// from `dir`.
    pub fn load(dir: &Path, kind: EnvKind) -> Result<Self, SearchError> {
        let read = |suffix: &str| {
            let path = dir.join(format!("{}_{suffix}.txt", kind.name()));
            std::fs::read_to_string(&path)
                .map(|t| (path.display().to_string(), t))
                .map_err(|source| SearchError::TemplateIo {
                    path: path.display().to_string(),
                    source,
                })
        };
        Self::parse([read("act")?, read("value")?, read("reflect")?])
    }
}

/// The three backend roles. They may be the same object.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub policy: &'a dyn PolicyBackend,
    pub value: &'a dyn PolicyBackend,
    pub reflection: &'a dyn PolicyBackend,
}

impl<'a> Backends<'a> {
    pub fn uniform(b: &'a dyn PolicyBackend) -> Self {
        Self {
            policy: b,
            value: b,
            reflection: b,
        }
    }
}

pub type EnvFactory<'a> = &'a (dyn Fn(&TaskSpec) -> Box<dyn Environment> + Sync);

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub success: bool,
    pub best_node: NodeId,
    pub best_trajectory: StateContext,
    pub best_reward: f64,
    pub episodes_used: usize,
    /// Nodes created below the root.
    pub nodes_expanded: usize,
    pub backend_calls: BackendCalls,
    pub stop_reason: StopReason,
    pub tree: SearchTree,
    pub reflections: ReflectionStore,
    pub header: TraceHeader,
    pub trace: Vec<TraceEvent>,
}

impl SearchResult {
    pub fn trace_jsonl(&self) -> String {
        crate::trace::to_jsonl(&self.header, &self.trace)
    }
}

const ROLE_POLICY: u64 = 0x9e37_79b9_7f4a_7c15;
const ROLE_VALUE: u64 = 0xc2b2_ae3d_27d4_eb4f;
const ROLE_REFLECT: u64 = 0x1656_67b1_9e37_79f9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `counter`-th backend call of a run.
pub fn call_seed(base: u64, role: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(base ^ role).wrapping_add(counter))
}

enum Interrupt {
    ProposalCap,
    Backend,
}

struct Run<'a> {
    task: &'a TaskSpec,
    factory: EnvFactory<'a>,
    backends: Backends<'a>,
    templates: &'a Templates,
    cfg: &'a SearchConfig,
    grammar: ActionGrammar,
    tree: SearchTree,
    store: ReflectionStore,
    tracer: Tracer,
    calls: BackendCalls,
    counter: u64,
    episode: usize,
    snapshots: HashMap<NodeId, EnvSnapshot>,
}

/// Runs the configured variant with bundled environments.
pub fn run(task: &TaskSpec, backends: Backends<'_>, templates: &Templates, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run_with_env(task, &make_env, backends, templates, cfg)
}

pub fn run_with_env(
    task: &TaskSpec,
    factory: EnvFactory<'_>,
    backends: Backends<'_>,
    templates: &Templates,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut run = Run {
        task,
        factory,
        backends,
        templates,
        cfg,
        grammar: factory(task).grammar().clone(),
        tree: SearchTree::new(task.input_text()),
        store: ReflectionStore::new(),
        tracer: Tracer::new(cfg.log_prompts),
        calls: BackendCalls::default(),
        counter: 0,
        episode: 0,
        snapshots: HashMap::new(),
    };
    let outcome = match cfg.variant {
        Variant::Lats => run.lats(),
        Variant::DfsPrune => run.dfs(),
        Variant::BestOfK => run.sampling(false),
        Variant::GreedyReact => run.sampling(true),
    }?;
    run.finish(outcome)
}

/// `run` with `cfg.variant` forced to LATS.
pub fn run_lats(task: &TaskSpec, backends: Backends<'_>, templates: &Templates, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(task, backends, templates, &SearchConfig { variant: Variant::Lats, ..cfg.clone() })
}

pub fn run_dfs_prune(task: &TaskSpec, backends: Backends<'_>, templates: &Templates, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(task, backends, templates, &SearchConfig { variant: Variant::DfsPrune, ..cfg.clone() })
}

pub fn run_best_of_k(task: &TaskSpec, backends: Backends<'_>, templates: &Templates, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(task, backends, templates, &SearchConfig { variant: Variant::BestOfK, ..cfg.clone() })
}

pub fn run_greedy_react(task: &TaskSpec, backends: Backends<'_>, templates: &Templates, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    run(task, backends, templates, &SearchConfig { variant: Variant::GreedyReact, ..cfg.clone() })
}

/// First non-empty line of a completion, without surrounding whitespace.
fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

impl Run<'_> {
    fn next_seed(&mut self, role: u64) -> u64 {
        let s = call_seed(self.cfg.seed, role, self.counter);
        self.counter += 1;
        s
    }

    fn emit(&mut self, node_ids: Vec<NodeId>, op: TraceOp) {
        self.tracer.emit(self.episode, node_ids, op);
    }

    fn remaining_proposals(&self) -> usize {
        self.cfg
            .max_proposals
            .map_or(usize::MAX, |cap| cap.saturating_sub(self.calls.proposals))
    }

    fn env_at(&self, node: NodeId) -> Result<Box<dyn Environment>, EnvError> {
        let mut env = (self.factory)(self.task);
        env.reset();
        if self.cfg.state_restore == StateRestore::Snapshot {
            if let Some(s) = self.snapshots.get(&node) {
                env.restore(s)?;
                return Ok(env);
            }
        }
        let path = self.tree.path_to(node).expect("node exists");
        for id in path.into_iter().skip(1) {
            let action = self.tree.nodes()[id.index()].action.as_ref().expect("non-root action");
            env.step(action);
        }
        Ok(env)
    }

    fn agent_bundle(&self) -> PromptBundle {
        let recs = self.store.select(&self.task.task_id, self.cfg.reflection_cap);
        inject(&self.templates.acting, &recs, self.cfg.agent_trajectories)
    }

    fn value_bundle(&self) -> PromptBundle {
        let recs = self.store.select(&self.task.task_id, self.cfg.reflection_cap);
        inject(&self.templates.value, &recs, true)
    }

    /// Samples up to `width` actions at `node`, steps each through its own
    /// environment copy and appends the results as children.
    fn expand(&mut self, node: NodeId, width: usize) -> Result<Vec<NodeId>, Interrupt> {
        let width = width.min(self.remaining_proposals());
        if width == 0 {
            return Err(Interrupt::ProposalCap);
        }
        let ctx = self.tree.reconstruct_context(node, &[]).expect("node exists");
        let bundle = self.agent_bundle();
        let prompt = match self.cfg.prompt_style {
            PromptStyle::Acting => assemble_acting_prompt(&bundle, &ctx),
            PromptStyle::Reasoning => assemble_reasoning_prompt(&bundle, &ctx),
        };
        let prompt_ref = self.tracer.prompt(&prompt);
        let seed = self.next_seed(ROLE_POLICY);
        self.calls.policy_calls += 1;
        let mut texts = match self.backends.policy.propose(&prompt, width, seed) {
            Ok(t) => t,
            Err(e) => {
                self.emit(
                    vec![],
                    TraceOp::Expand {
                        parent: node,
                        prompt: prompt_ref,
                        children: vec![],
                        error: Some(e.to_string()),
                    },
                );
                return Err(Interrupt::Backend);
            }
        };
        texts.truncate(width);
        self.calls.proposals += texts.len();

        let mut specs = Vec::with_capacity(texts.len());
        let mut snaps = Vec::with_capacity(texts.len());
        for text in &texts {
            let line = first_line(text);
            let spec = match parse_action(line, &self.grammar) {
                Ok(action) => match self.env_at(node) {
                    Ok(mut env) => {
                        let obs = env.step(&action);
                        snaps.push(Some(env.snapshot()));
                        ChildSpec {
                            action,
                            observation: obs.text,
                            is_terminal: obs.terminal,
                            reward: obs.reward,
                        }
                    }
                    Err(_) => {
                        snaps.push(None);
                        invalid_child(line)
                    }
                },
                Err(_) => {
                    snaps.push(self.snapshots.get(&node).cloned());
                    invalid_child(line)
                }
            };
            specs.push(spec);
        }
        let ids = self.tree.add_children(node, specs).expect("rewards are unit-range");
        let limit = self.cfg.depth_limit;
        let mut records = Vec::with_capacity(ids.len());
        for (&id, snap) in ids.iter().zip(snaps) {
            let n = self.tree.node_mut(id).expect("fresh child");
            if !n.is_terminal && n.depth >= limit {
                n.closed = true;
            }
            records.push(ChildRecord {
                id,
                action: n.action.clone().expect("child action"),
                observation: n.observation.clone().unwrap_or_default(),
                terminal: n.is_terminal,
                reward: n.reward,
                closed: n.closed,
            });
            if let (StateRestore::Snapshot, Some(s)) = (self.cfg.state_restore, snap) {
                self.snapshots.insert(id, s);
            }
        }
        self.emit(
            ids.clone(),
            TraceOp::Expand {
                parent: node,
                prompt: prompt_ref,
                children: records,
                error: None,
            },
        );
        Ok(ids)
    }

    fn evaluate(&mut self, parent: NodeId) {
        if self.cfg.value_mode == ValueMode::None {
            return;
        }
        let bundle = self.value_bundle();
        let eval = Evaluator {
            mode: self.cfg.value_mode,
            lambda: self.cfg.lambda,
            template: &bundle,
            backend: self.backends.value,
            reflections: &[],
        };
        let base = self.cfg.seed;
        let mut counter = self.counter;
        let report = evaluate_children(&mut self.tree, parent, &eval, |_| {
            // two seeds per child: the call and its retry
            let s = call_seed(base, ROLE_VALUE, counter);
            counter += 2;
            s
        })
        .expect("parent exists");
        self.counter = counter;
        self.calls.value_calls += report.calls;
        let children = self.tree.node(parent).expect("parent exists").children.clone();
        if children.is_empty() {
            return;
        }
        let scores = children
            .iter()
            .map(|&c| self.tree.nodes()[c.index()].eval_score.clone().expect("just scored"))
            .collect();
        let prompts = report.prompts.iter().map(|(_, p)| self.tracer.prompt(p)).collect();
        self.emit(
            children,
            TraceOp::Evaluate {
                scores,
                prompts,
                flagged: report.flagged,
                errors: report.errors.iter().map(|(id, e)| format!("node {}: {e}", id.0)).collect(),
            },
        );
    }

    fn backprop(&mut self, leaf: NodeId, reward: f64) {
        self.tree.backpropagate(leaf, reward).expect("reward in range");
        let path = self.tree.path_to(leaf).expect("leaf exists");
        let (values, visits) = path
            .iter()
            .map(|&id| {
                let n = &self.tree.nodes()[id.index()];
                (n.value, n.visits)
            })
            .unzip();
        self.emit(path, TraceOp::Backprop { reward, values, visits });
    }

    fn reflect(&mut self, node: NodeId) {
        let reward = self.tree.nodes()[node.index()].reward.unwrap_or(0.0);
        let ctx = self.tree.reconstruct_context(node, &[]).expect("node exists");
        let seed = self.next_seed(ROLE_REFLECT);
        self.calls.reflection_calls += 1;
        let Ok(r) = generate_reflection(&ctx, reward, &self.templates.reflection, self.backends.reflection, seed) else {
            return;
        };
        self.store.record(make_record(&self.task.task_id, &ctx, reward, &r, self.episode));
        let prompt = self.tracer.prompt(&r.prompt);
        self.emit(
            vec![node],
            TraceOp::Reflect {
                reward,
                reflection: r.text,
                flagged: r.flagged,
                prompt,
            },
        );
    }

    fn success_child(&self, kids: &[NodeId]) -> Option<NodeId> {
        kids.iter().copied().find(|&c| {
            let n = &self.tree.nodes()[c.index()];
            n.is_terminal && n.reward.is_some_and(is_success)
        })
    }

    /// Highest selection value; ties go to the earliest child.
    fn best_of(&self, kids: &[NodeId]) -> Option<NodeId> {
        let mut best: Option<(NodeId, f64)> = None;
        for &c in kids {
            let v = self.tree.selection_stats(c).0;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        best.map(|(c, _)| c)
    }

    fn lats(&mut self) -> Result<Option<StopReason>, SearchError> {
        let cfg = self.cfg;
        for ep in 1..=cfg.k {
            self.episode = ep;
            // With every branch finished, sample fresh children at the root.
            let leaf = self.tree.select_path(cfg.w).unwrap_or(NodeId::ROOT);
            let path = self.tree.path_to(leaf)?;
            self.emit(path, TraceOp::Select { w: cfg.w });

            let kids = match self.expand(leaf, cfg.n) {
                Ok(k) => k,
                Err(Interrupt::ProposalCap) => return Ok(Some(StopReason::ProposalCap)),
                Err(Interrupt::Backend) => continue,
            };
            if let Some(s) = self.success_child(&kids) {
                self.backprop(s, self.tree.nodes()[s.index()].reward.unwrap_or(1.0));
                return Ok(Some(StopReason::Success));
            }
            self.evaluate(leaf);

            if cfg.skip_simulation {
                let mut worst_failure: Option<(NodeId, f64)> = None;
                for &c in &kids {
                    let n = &self.tree.nodes()[c.index()];
                    if let (true, Some(r)) = (n.is_terminal, n.reward) {
                        self.backprop(c, r);
                        if worst_failure.is_none_or(|(_, b)| r > b) {
                            worst_failure = Some((c, r));
                        }
                    }
                }
                if let (true, Some((c, _))) = (cfg.reflection_enabled, worst_failure) {
                    self.reflect(c);
                }
                continue;
            }

            let Some(mut cur) = self.best_of(&kids) else {
                continue;
            };
            self.emit(vec![leaf, cur], TraceOp::SimulateStep);
            let mut aborted = false;
            loop {
                let node = &self.tree.nodes()[cur.index()];
                if node.is_terminal || node.closed {
                    break;
                }
                let kids = match self.expand(cur, cfg.n) {
                    Ok(k) => k,
                    Err(Interrupt::ProposalCap) => {
                        self.backprop(cur, 0.0);
                        return Ok(Some(StopReason::ProposalCap));
                    }
                    Err(Interrupt::Backend) => {
                        aborted = true;
                        break;
                    }
                };
                if let Some(s) = self.success_child(&kids) {
                    self.backprop(s, self.tree.nodes()[s.index()].reward.unwrap_or(1.0));
                    return Ok(Some(StopReason::Success));
                }
                self.evaluate(cur);
                let Some(next) = self.best_of(&kids) else {
                    break;
                };
                self.emit(vec![cur, next], TraceOp::SimulateStep);
                cur = next;
            }
            if aborted {
                continue;
            }
            let node = &self.tree.nodes()[cur.index()];
            let terminal = node.is_terminal;
            let reward = if terminal { node.reward.unwrap_or(0.0) } else { 0.0 };
            self.backprop(cur, reward);
            if terminal && cfg.reflection_enabled {
                self.reflect(cur);
            }
        }
        Ok(Some(StopReason::Budget))
    }

    fn dfs(&mut self) -> Result<Option<StopReason>, SearchError> {
        let cfg = self.cfg;
        let mut stack = vec![NodeId::ROOT];
        let mut expansions = 0;
        while let Some(node) = stack.pop() {
            if expansions >= cfg.k {
                return Ok(Some(StopReason::Budget));
            }
            expansions += 1;
            self.episode = expansions;
            let path = self.tree.path_to(node)?;
            self.emit(path, TraceOp::Select { w: 0.0 });
            let kids = match self.expand(node, cfg.n) {
                Ok(k) => k,
                Err(Interrupt::ProposalCap) => return Ok(Some(StopReason::ProposalCap)),
                Err(Interrupt::Backend) => continue,
            };
            if self.success_child(&kids).is_some() {
                return Ok(Some(StopReason::Success));
            }
            self.evaluate(node);
            if cfg.reflection_enabled {
                let failed = kids
                    .iter()
                    .copied()
                    .filter(|&c| self.tree.nodes()[c.index()].is_terminal)
                    .max_by(|a, b| {
                        let r = |id: &NodeId| self.tree.nodes()[id.index()].reward.unwrap_or(0.0);
                        r(a).total_cmp(&r(b)).then(b.cmp(a))
                    });
                if let Some(c) = failed {
                    self.reflect(c);
                }
            }
            let mut open: Vec<(NodeId, f64)> = kids
                .iter()
                .filter(|&&c| {
                    let n = &self.tree.nodes()[c.index()];
                    !n.is_terminal && !n.closed
                })
                .map(|&c| (c, self.tree.selection_stats(c).0))
                .filter(|&(_, v)| v >= cfg.prune_threshold)
                .collect();
            // best on top of the stack, ties to the earliest child
            open.sort_by(|a, b| b.1.total_cmp(&a.1));
            stack.extend(open.into_iter().rev().map(|(c, _)| c));
        }
        Ok(Some(StopReason::Exhausted))
    }

    /// Independent greedy rollouts, one proposal per step. With `reflect`,
    /// failures feed reflections into later rollouts.
    fn sampling(&mut self, reflect: bool) -> Result<Option<StopReason>, SearchError> {
        let cfg = self.cfg;
        for ep in 1..=cfg.k {
            self.episode = ep;
            self.emit(vec![NodeId::ROOT], TraceOp::Select { w: 0.0 });
            let mut cur = NodeId::ROOT;
            let mut aborted = false;
            loop {
                let node = &self.tree.nodes()[cur.index()];
                if node.is_terminal || node.closed {
                    break;
                }
                let kids = match self.expand(cur, 1) {
                    Ok(k) => k,
                    Err(Interrupt::ProposalCap) => {
                        if cur != NodeId::ROOT {
                            self.backprop(cur, 0.0);
                        }
                        return Ok(Some(StopReason::ProposalCap));
                    }
                    Err(Interrupt::Backend) => {
                        aborted = true;
                        break;
                    }
                };
                let Some(&next) = kids.first() else {
                    break;
                };
                self.emit(vec![cur, next], TraceOp::SimulateStep);
                cur = next;
                if self.success_child(&kids).is_some() {
                    self.backprop(cur, self.tree.nodes()[cur.index()].reward.unwrap_or(1.0));
                    return Ok(Some(StopReason::Success));
                }
            }
            if aborted || cur == NodeId::ROOT {
                continue;
            }
            let node = &self.tree.nodes()[cur.index()];
            let terminal = node.is_terminal;
            let reward = if terminal { node.reward.unwrap_or(0.0) } else { 0.0 };
            self.backprop(cur, reward);
            if reflect && terminal {
                self.reflect(cur);
            }
        }
        Ok(Some(StopReason::Budget))
    }

    /// Best terminal by reward, then selection value, then id. Without any
    /// terminal, the highest-valued node.
    fn pick_best(&self) -> NodeId {
        let nodes = self.tree.nodes();
        let key = |id: NodeId| self.tree.selection_stats(id).0;
        let terminals = nodes.iter().filter(|n| n.is_terminal);
        let best_terminal = terminals.fold(None::<(NodeId, f64, f64)>, |acc, n| {
            let r = n.reward.unwrap_or(0.0);
            let v = key(n.id);
            match acc {
                Some((_, br, bv)) if r < br || (r == br && v <= bv) => acc,
                _ => Some((n.id, r, v)),
            }
        });
        if let Some((id, _, _)) = best_terminal {
            return id;
        }
        nodes
            .iter()
            .skip(1)
            .fold(None::<(NodeId, f64)>, |acc, n| match acc {
                Some((_, bv)) if key(n.id) <= bv => acc,
                _ => Some((n.id, key(n.id))),
            })
            .map_or(NodeId::ROOT, |(id, _)| id)
    }

    fn finish(mut self, stop: Option<StopReason>) -> Result<SearchResult, SearchError> {
        let best = self.pick_best();
        let node = self.tree.node(best)?;
        let best_reward = if node.is_terminal { node.reward.unwrap_or(0.0) } else { 0.0 };
        let success = node.is_terminal && is_success(best_reward);
        let stop_reason = if success {
            StopReason::Success
        } else {
            stop.unwrap_or(StopReason::Budget)
        };
        let nodes_expanded = self.tree.len() - 1;
        let episodes_used = self.episode;
        let calls = self.calls;
        self.emit(
            vec![best],
            TraceOp::Terminate {
                success,
                best_reward,
                episodes_used,
                nodes_expanded,
                backend_calls: calls,
                reason: stop_reason,
            },
        );
        let reflections: Vec<String> = self
            .store
            .select(&self.task.task_id, self.cfg.reflection_cap)
            .iter()
            .map(|r| r.reflection.clone())
            .collect();
        let best_trajectory = self.tree.reconstruct_context(best, &reflections)?;
        let header = TraceHeader {
            engine_version: ENGINE_VERSION.into(),
            task_id: self.task.task_id.clone(),
            env: self.task.kind().name().into(),
            input: self.tree.input().to_string(),
            config: self.cfg.clone(),
        };
        Ok(SearchResult {
            success,
            best_node: best,
            best_trajectory,
            best_reward,
            episodes_used,
            nodes_expanded,
            backend_calls: calls,
            stop_reason,
            tree: self.tree,
            reflections: self.store,
            header,
            trace: self.tracer.into_events(),
        })
    }
}

fn invalid_child(raw: &str) -> ChildSpec {
    ChildSpec {
        action: ActionSample::thought(raw),
        observation: INVALID_ACTION.into(),
        is_terminal: false,
        reward: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CountingBackend, Oracle24Backend, ScriptedBackend};

    #[test]
    fn bundled_templates_parse_and_carry_required_text() {
        for kind in [EnvKind::Game24, EnvKind::Docqa, EnvKind::Shop, EnvKind::Solution] {
            let t = Templates::bundled(kind);
            assert!(t.value.instruction.contains("Thus the correctness score is"), "{kind:?}");
            assert!(t
                .acting
                .reflections_header
                .as_deref()
                .unwrap()
                .contains("The following reflection(s) give a plan"));
            assert!(!t.acting.few_shot.is_empty());
        }
    }

    #[test]
    fn seeds_differ_per_call_and_role() {
        assert_ne!(call_seed(1, ROLE_POLICY, 0), call_seed(1, ROLE_POLICY, 1));
        assert_ne!(call_seed(1, ROLE_POLICY, 0), call_seed(1, ROLE_VALUE, 0));
        assert_eq!(call_seed(7, ROLE_VALUE, 3), call_seed(7, ROLE_VALUE, 3));
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            variant: Variant::DfsPrune,
            value_mode: ValueMode::None,
            ..SearchConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SearchError::Config(_))));
        assert!(SearchConfig { n: 0, ..SearchConfig::default() }.validate().is_err());
        assert!(SearchConfig { lambda: 1.5, ..SearchConfig::default() }.validate().is_err());
    }

    #[test]
    fn perfect_oracle_solves_in_first_episode() {
        let task = TaskSpec::game24("p", [4, 4, 6, 8]);
        let policy = Oracle24Backend::new(1.0);
        let valuer = ScriptedBackend::from_pairs([("Input", vec!["Thus the correctness score is 5"])], "");
        let backends = Backends {
            policy: &policy,
            value: &valuer,
            reflection: &valuer,
        };
        let cfg = SearchConfig::for_env(EnvKind::Game24);
        let r = run_lats(&task, backends, &Templates::bundled(EnvKind::Game24), &cfg).unwrap();
        assert!(r.success);
        assert_eq!(r.episodes_used, 1);
        assert!(r.nodes_expanded <= cfg.n * cfg.depth_limit);
        assert_eq!(r.best_reward, 1.0);
    }

    #[test]
    fn snapshot_and_replay_restores_agree() {
        let task = TaskSpec::game24("p", [3, 3, 8, 8]);
        let policy = Oracle24Backend::new(0.3);
        let valuer = crate::policy::Oracle24Valuer::new(0.8);
        let backends = Backends {
            policy: &policy,
            value: &valuer,
            reflection: &valuer,
        };
        let t = Templates::bundled(EnvKind::Game24);
        let base = SearchConfig { k: 10, ..SearchConfig::for_env(EnvKind::Game24) };
        let a = run(&task, backends, &t, &base).unwrap();
        let b = run(
            &task,
            backends,
            &t,
            &SearchConfig {
                state_restore: StateRestore::Snapshot,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(a.tree.dump_jsonl(), b.tree.dump_jsonl());
    }

    #[test]
    fn unparseable_output_becomes_invalid_thought() {
        let task = TaskSpec::game24("p", [1, 1, 1, 1]);
        let policy = CountingBackend::new(ScriptedBackend::from_pairs([("zz", vec!["zz"])], "combine[1 +"));
        let r = run_best_of_k(
            &task,
            Backends::uniform(&policy),
            &Templates::bundled(EnvKind::Game24),
            &SearchConfig {
                k: 1,
                depth_limit: 2,
                ..SearchConfig::for_env(EnvKind::Game24)
            },
        )
        .unwrap();
        let child = &r.tree.nodes()[1];
        assert_eq!(child.observation.as_deref(), Some(INVALID_ACTION));
        assert!(child.action.as_ref().unwrap().is_thought());
        assert!(!r.success);
        assert_eq!(policy.calls(), 2);
    }
}
