//! Search tree over agent trajectories.
//!
//! Nodes live in a dense arena indexed by [`NodeId`]. Each node stores the
//! action that produced it and the observation the environment returned, so
//! any state can be rebuilt by walking the root-to-node path
//! ([`SearchTree::reconstruct_context`]).
//!
//! Visit counts start at zero and `value` is always the arithmetic mean of the
//! rewards backpropagated through the node. An evaluation prior (the combined
//! value score) is kept separately in `eval_score` and folded in only when
//! computing selection statistics, see [`SearchTree::selection_stats`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::ActionSample;
use crate::valuation::ValueScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cannot expand terminal node {0}")]
    TerminalExpansion(NodeId),
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("uct undefined for zero visits (child {child}, parent {parent})")]
    ZeroVisits { child: u32, parent: u32 },
    #[error("tree exhausted: every leaf is terminal or closed")]
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub action: Option<ActionSample>,
    pub observation: Option<String>,
    pub depth: usize,
    pub value: f64,
    pub visits: u32,
    pub is_terminal: bool,
    pub reward: Option<f64>,
    pub eval_score: Option<ValueScore>,
    /// Non-terminal node that may not be expanded further (depth limit).
    #[serde(default)]
    pub closed: bool,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One expansion result: the proposed action, what the environment said, and
/// whether the episode ended there.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildSpec {
    pub action: ActionSample,
    pub observation: String,
    pub is_terminal: bool,
    pub reward: Option<f64>,
}

/// Textual state of a node: the task input plus every (action, observation)
/// pair along its path, plus whatever reflections are in scope.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StateContext {
    pub input: String,
    pub steps: Vec<(ActionSample, Option<String>)>,
    pub reflections: Vec<String>,
}

/// Upper confidence bound for a child: `V + w * sqrt(ln N(parent) / N(child))`.
pub fn uct(child_value: f64, child_visits: u32, parent_visits: u32, w: f64) -> Result<f64, TreeError> {
    if child_visits == 0 || parent_visits == 0 {
        return Err(TreeError::ZeroVisits {
            child: child_visits,
            parent: parent_visits,
        });
    }
    let explore = (f64::from(parent_visits).ln() / f64::from(child_visits)).sqrt();
    Ok(child_value + w * explore)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    nodes: Vec<Node>,
    input: String,
}

impl SearchTree {
    pub fn new(input: impl Into<String>) -> Self {
        let root = Node {
            id: NodeId::ROOT,
            parent: None,
            children: Vec::new(),
            action: None,
            observation: None,
            depth: 0,
            value: 0.0,
            visits: 0,
            is_terminal: false,
            reward: None,
            eval_score: None,
            closed: false,
        };
        Self {
            nodes: vec![root],
            input: input.into(),
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn input(&self) -> &str {
        &self.input
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))
    }

    /// Root-first list of ids from the root to `id` inclusive.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let node = self.node(c)?;
            path.push(c);
            cur = node.parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Appends one child per result, in order. Identical actions stay distinct
    /// nodes.
    pub fn add_children(&mut self, parent: NodeId, results: Vec<ChildSpec>) -> Result<Vec<NodeId>, TreeError> {
        let parent_node = self.node(parent)?;
        if parent_node.is_terminal {
            return Err(TreeError::TerminalExpansion(parent));
        }
        let depth = parent_node.depth + 1;
        let mut ids = Vec::with_capacity(results.len());
        for spec in results {
            if let Some(r) = spec.reward {
                check_reward(r)?;
            }
            let id = NodeId(self.nodes.len());
            self.nodes.push(Node {
                id,
                parent: Some(parent),
                children: Vec::new(),
                action: Some(spec.action),
                observation: Some(spec.observation),
                depth,
                value: 0.0,
                visits: 0,
                is_terminal: spec.is_terminal,
                reward: if spec.is_terminal { Some(spec.reward.unwrap_or(0.0)) } else { None },
                eval_score: None,
                closed: false,
            });
            ids.push(id);
        }
        self.nodes[parent.0].children.extend(ids.iter().copied());
        Ok(ids)
    }

    /// Increments N and folds `reward` into the running mean of every node on
    /// the root-to-`leaf` path.
    pub fn backpropagate(&mut self, leaf: NodeId, reward: f64) -> Result<(), TreeError> {
        check_reward(reward)?;
        for id in self.path_to(leaf)? {
            let node = &mut self.nodes[id.0];
            node.visits += 1;
            let n = f64::from(node.visits);
            node.value = (node.value * (n - 1.0) + reward) / n;
        }
        Ok(())
    }

    /// Value and visit count used by selection. An evaluated node counts its
    /// combined score as one virtual sample on top of its real rewards.
    pub fn selection_stats(&self, id: NodeId) -> (f64, u32) {
        let node = &self.nodes[id.0];
        match &node.eval_score {
            Some(score) => {
                let n = node.visits + 1;
                let sum = score.combined + node.value * f64::from(node.visits);
                (sum / f64::from(n), n)
            }
            None => (node.value, node.visits),
        }
    }

    /// A node is exhausted when nothing below it can still be expanded.
    pub fn is_exhausted(&self, id: NodeId) -> bool {
        let node = &self.nodes[id.0];
        if node.is_terminal || node.closed {
            return true;
        }
        !node.children.is_empty() && node.children.iter().all(|&c| self.is_exhausted(c))
    }

    /// Descends from the root by UCT until a leaf. Unvisited children win in
    /// creation order; ties go to the least visited, then earliest, child. Exhausted subtrees are
    /// skipped.
    pub fn select_path(&self, w: f64) -> Result<NodeId, TreeError> {
        if self.is_exhausted(NodeId::ROOT) {
            return Err(TreeError::Exhausted);
        }
        let mut cur = NodeId::ROOT;
        loop {
            let node = &self.nodes[cur.0];
            if node.children.is_empty() {
                return Ok(cur);
            }
            cur = self.best_child(cur, w).ok_or(TreeError::Exhausted)?;
        }
    }

    /// Child of `parent` with the highest UCT among non-exhausted children.
    pub fn best_child(&self, parent: NodeId, w: f64) -> Option<NodeId> {
        let node = &self.nodes[parent.0];
        let open: Vec<NodeId> = node
            .children
            .iter()
            .copied()
            .filter(|&c| !self.is_exhausted(c))
            .collect();
        if let Some(&fresh) = open.iter().find(|&&c| self.selection_stats(c).1 == 0) {
            return Some(fresh);
        }
        let (_, parent_n) = self.selection_stats(parent);
        let parent_n = parent_n.max(1);
        let mut best: Option<(NodeId, f64, u32)> = None;
        for c in open {
            let (v, n) = self.selection_stats(c);
            let score = uct(v, n, parent_n, w).expect("visits checked above");
            // equal scores go to the less visited child, then the earlier one
            if best.is_none_or(|(_, s, bn)| score > s || (score == s && n < bn)) {
                best = Some((c, score, n));
            }
        }
        best.map(|(c, _, _)| c)
    }

    pub fn reconstruct_context(&self, id: NodeId, reflections: &[String]) -> Result<StateContext, TreeError> {
        let path = self.path_to(id)?;
        let steps = path
            .iter()
            .skip(1)
            .map(|&p| {
                let n = &self.nodes[p.0];
                (
                    n.action.clone().expect("non-root nodes carry an action"),
                    n.observation.clone(),
                )
            })
            .collect();
        Ok(StateContext {
            input: self.input.clone(),
            steps,
            reflections: reflections.to_vec(),
        })
    }

    /// One JSON object per node, in id order.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let line = NodeDump::from(node);
            out.push_str(&serde_json::to_string(&line).expect("node dump serializes"));
            out.push('\n');
        }
        out
    }
}

fn check_reward(r: f64) -> Result<(), TreeError> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(TreeError::RewardOutOfRange(r))
    }
}

/// Line format of the tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub action: Option<String>,
    pub observation: Option<String>,
    #[serde(rename = "V")]
    pub value: f64,
    #[serde(rename = "N")]
    pub visits: u32,
    pub terminal: bool,
    pub reward: Option<f64>,
}

impl From<&Node> for NodeDump {
    fn from(n: &Node) -> Self {
        Self {
            id: n.id,
            parent: n.parent,
            depth: n.depth,
            action: n.action.as_ref().map(|a| a.raw.clone()),
            observation: n.observation.clone(),
            value: n.value,
            visits: n.visits,
            terminal: n.is_terminal,
            reward: n.reward,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ActionSample;

    fn child(text: &str) -> ChildSpec {
        ChildSpec {
            action: ActionSample::thought(text),
            observation: "OK.".into(),
            is_terminal: false,
            reward: None,
        }
    }

    fn terminal(text: &str, r: f64) -> ChildSpec {
        ChildSpec {
            action: ActionSample::thought(text),
            observation: "done".into(),
            is_terminal: true,
            reward: Some(r),
        }
    }

    #[test]
    fn uct_spot_values() {
        assert_eq!(uct(0.7, 1, 1, 1.0).unwrap(), 0.7);
        let expected = 0.5 + (10f64.ln() / 2.0).sqrt();
        assert!((uct(0.5, 2, 10, 1.0).unwrap() - expected).abs() < 1e-12);
        assert_eq!(uct(0.3, 4, 20, 0.0).unwrap(), 0.3);
        assert!(matches!(uct(0.3, 0, 20, 1.0), Err(TreeError::ZeroVisits { .. })));
        assert!(matches!(uct(0.3, 1, 0, 1.0), Err(TreeError::ZeroVisits { .. })));
    }

    #[test]
    fn children_get_depth_and_order() {
        let mut t = SearchTree::new("q");
        let a = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        let b = t.add_children(a, vec![child("b")]).unwrap()[0];
        let kids = t
            .add_children(b, (0..5).map(|i| child(&format!("c{i}"))).collect())
            .unwrap();
        assert_eq!(kids.len(), 5);
        for (i, k) in kids.iter().enumerate() {
            let n = t.node(*k).unwrap();
            assert_eq!(n.depth, 3);
            assert_eq!(n.action.as_ref().unwrap().raw, format!("c{i}"));
        }
        assert_eq!(t.node(b).unwrap().children, kids);
    }

    #[test]
    fn duplicate_actions_stay_distinct() {
        let mut t = SearchTree::new("q");
        let kids = t
            .add_children(
                t.root(),
                vec![child("x"), child("x"), child("y"), child("x"), child("z")],
            )
            .unwrap();
        assert_eq!(kids.len(), 5);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn terminal_expansion_rejected() {
        let mut t = SearchTree::new("q");
        let k = t.add_children(t.root(), vec![terminal("end", 0.0)]).unwrap()[0];
        assert_eq!(t.add_children(k, vec![child("x")]), Err(TreeError::TerminalExpansion(k)));
    }

    #[test]
    fn backprop_running_mean() {
        let mut t = SearchTree::new("q");
        let k = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        t.backpropagate(k, 0.8).unwrap();
        let n = t.node(k).unwrap();
        assert_eq!((n.visits, n.value), (1, 0.8));

        let mut t = SearchTree::new("q");
        let k = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        for r in [0.0, 1.0, 1.0] {
            t.backpropagate(k, r).unwrap();
        }
        let root = t.node(t.root()).unwrap();
        assert_eq!(root.visits, 3);
        assert!((root.value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn backprop_from_n2() {
        let mut t = SearchTree::new("q");
        let k = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        t.backpropagate(k, 0.0).unwrap();
        t.backpropagate(k, 1.0).unwrap();
        assert_eq!(t.node(k).unwrap().value, 0.5);
        t.backpropagate(k, 1.0).unwrap();
        let history = [0.0, 1.0, 1.0];
        let mean = history.iter().sum::<f64>() / 3.0;
        assert!((t.node(k).unwrap().value - mean).abs() < 1e-12);
    }

    #[test]
    fn backprop_rejects_out_of_range() {
        let mut t = SearchTree::new("q");
        assert_eq!(t.backpropagate(t.root(), 1.5), Err(TreeError::RewardOutOfRange(1.5)));
        assert!(t.backpropagate(t.root(), -0.1).is_err());
        assert_eq!(t.node(t.root()).unwrap().visits, 0);
    }

    #[test]
    fn select_argmax_with_zero_weight() {
        let mut t = SearchTree::new("q");
        let kids = t.add_children(t.root(), vec![child("a"), child("b")]).unwrap();
        t.backpropagate(kids[0], 0.9).unwrap();
        t.backpropagate(kids[1], 0.1).unwrap();
        assert_eq!(t.select_path(0.0).unwrap(), kids[0]);
    }

    #[test]
    fn select_prefers_underexplored_child() {
        let mut t = SearchTree::new("q");
        let kids = t.add_children(t.root(), vec![child("a"), child("b")]).unwrap();
        for _ in 0..10 {
            t.backpropagate(kids[0], 1.0).unwrap();
        }
        t.backpropagate(kids[1], 0.0).unwrap();
        // 0 + 2*sqrt(ln 11) > 1 + 2*sqrt(ln 11 / 10)
        let lhs = 2.0 * 11f64.ln().sqrt();
        let rhs = 1.0 + 2.0 * (11f64.ln() / 10.0).sqrt();
        assert!(lhs > rhs);
        assert_eq!(t.select_path(2.0).unwrap(), kids[1]);
    }

    #[test]
    fn unvisited_children_first_in_order() {
        let mut t = SearchTree::new("q");
        let kids = t
            .add_children(t.root(), vec![child("a"), child("b"), child("c")])
            .unwrap();
        t.backpropagate(kids[0], 1.0).unwrap();
        assert_eq!(t.select_path(0.0).unwrap(), kids[1]);
    }

    #[test]
    fn ties_break_to_earliest() {
        let mut t = SearchTree::new("q");
        let kids = t
            .add_children(t.root(), vec![child("a"), child("b"), child("c")])
            .unwrap();
        for k in &kids {
            t.backpropagate(*k, 0.5).unwrap();
        }
        assert_eq!(t.select_path(1.0).unwrap(), kids[0]);
    }

    #[test]
    fn all_terminal_is_exhausted() {
        let mut t = SearchTree::new("q");
        t.add_children(t.root(), vec![terminal("a", 0.0), terminal("b", 1.0)])
            .unwrap();
        assert_eq!(t.select_path(1.0), Err(TreeError::Exhausted));
    }

    #[test]
    fn selection_skips_exhausted_subtrees() {
        let mut t = SearchTree::new("q");
        let kids = t.add_children(t.root(), vec![child("a"), child("b")]).unwrap();
        t.add_children(kids[0], vec![terminal("x", 0.0)]).unwrap();
        t.backpropagate(kids[0], 1.0).unwrap();
        t.backpropagate(kids[1], 0.0).unwrap();
        assert_eq!(t.select_path(0.0).unwrap(), kids[1]);
    }

    #[test]
    fn evaluation_prior_acts_as_virtual_sample() {
        let mut t = SearchTree::new("q");
        let k = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        t.node_mut(k).unwrap().eval_score = Some(ValueScore {
            lm_score: 0.6,
            sc_score: 0.2,
            combined: 0.4,
            lm_raw: Some(6),
        });
        assert_eq!(t.selection_stats(k), (0.4, 1));
        t.backpropagate(k, 1.0).unwrap();
        let (v, n) = t.selection_stats(k);
        assert_eq!(n, 2);
        assert!((v - 0.7).abs() < 1e-12);
        // stored value stays the true mean of rewards
        assert_eq!(t.node(k).unwrap().value, 1.0);
    }

    #[test]
    fn reconstruct_context_paths() {
        let mut t = SearchTree::new("q");
        let ctx = t.reconstruct_context(t.root(), &[]).unwrap();
        assert!(ctx.steps.is_empty());
        let a = t.add_children(t.root(), vec![child("a")]).unwrap()[0];
        let b = t.add_children(a, vec![child("b")]).unwrap()[0];
        let c = t.add_children(b, vec![child("c")]).unwrap()[0];
        let refl = vec!["r1".to_string(), "r2".to_string()];
        let ctx = t.reconstruct_context(c, &refl).unwrap();
        let raws: Vec<_> = ctx.steps.iter().map(|(a, _)| a.raw.as_str()).collect();
        assert_eq!(raws, ["a", "b", "c"]);
        assert_eq!(ctx.reflections, refl);
        assert_eq!(ctx, t.reconstruct_context(c, &refl).unwrap());
        assert_eq!(
            t.reconstruct_context(NodeId(99), &[]),
            Err(TreeError::UnknownNode(NodeId(99)))
        );
    }

    #[test]
    fn dump_has_one_line_per_node() {
        let mut t = SearchTree::new("q");
        t.add_children(t.root(), vec![child("a"), terminal("b", 1.0)])
            .unwrap();
        let dump = t.dump_jsonl();
        let lines: Vec<NodeDump> = dump
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2].reward, Some(1.0));
        assert!(dump.lines().nth(1).unwrap().contains("\"V\":0.0"));
    }
}
