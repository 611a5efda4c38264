//! State evaluation: an LM-generated correctness score, a self-consistency
//! score among siblings, and their weighted mix.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{assemble_value_prompt, ActionSample, BackendError, PolicyBackend, PromptBundle};
use crate::tree::{NodeId, SearchTree, StateContext, TreeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScore {
    pub lm_score: f64,
    pub sc_score: f64,
    pub combined: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_raw: Option<u8>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValueError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// LM score mixed with self-consistency.
    Full,
    /// Self-consistency only; no value-backend calls.
    ScOnly,
    /// No heuristic at all; children keep value 0.
    None,
}

impl ValueMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "sc_only" | "sc-only" => Some(Self::ScOnly),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ValueError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ValueError::OutOfRange { name, value })
    }
}

/// `lambda * lm + (1 - lambda) * sc`.
pub fn combine(lm: f64, sc: f64, lambda: f64) -> Result<f64, ValueError> {
    check_unit("lm", lm)?;
    check_unit("sc", sc)?;
    check_unit("lambda", lambda)?;
    Ok(lambda * lm + (1.0 - lambda) * sc)
}

/// Share of siblings whose normalized action equals the target's.
pub fn sc_score(siblings: &[ActionSample], target_index: usize) -> f64 {
    let key = siblings[target_index].normalized();
    let same = siblings.iter().filter(|s| s.normalized() == key).count();
    same as f64 / siblings.len() as f64
}

static SCORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)correctness score is\s*\{?\s*(-?\d+)").unwrap());

/// Last "correctness score is N" in the text, clamped to 1..=10.
pub fn parse_correctness_score(text: &str) -> Option<u8> {
    let last = SCORE.captures_iter(text).last()?;
    let n: i64 = last[1].parse().unwrap_or(if last[1].starts_with('-') { 1 } else { 10 });
    Some(n.clamp(1, 10) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmScore {
    pub score: f64,
    pub raw: Option<u8>,
    /// No parseable score even after the retry.
    pub flagged: bool,
    pub calls: usize,
    pub prompt: String,
}

/// Asks the value backend to grade a trajectory; one retry when the answer
/// carries no score.
pub fn lm_score(
    ctx: &StateContext,
    template: &PromptBundle,
    backend: &dyn PolicyBackend,
    seed: u64,
) -> Result<LmScore, BackendError> {
    let prompt = assemble_value_prompt(template, ctx);
    let mut calls = 0;
    for attempt in 0..2u64 {
        calls += 1;
        let out = backend.propose(&prompt, 1, seed.wrapping_add(attempt))?;
        if let Some(s) = out.first().and_then(|t| parse_correctness_score(t)) {
            return Ok(LmScore {
                score: f64::from(s) / 10.0,
                raw: Some(s),
                flagged: false,
                calls,
                prompt,
            });
        }
    }
    Ok(LmScore {
        score: 0.0,
        raw: None,
        flagged: true,
        calls,
        prompt,
    })
}

/// What the evaluation step needs besides the tree.
pub struct Evaluator<'a> {
    pub mode: ValueMode,
    pub lambda: f64,
    pub template: &'a PromptBundle,
    pub backend: &'a dyn PolicyBackend,
    pub reflections: &'a [String],
}

#[derive(Debug, Default)]
pub struct EvalReport {
    pub calls: usize,
    pub flagged: Vec<NodeId>,
    pub errors: Vec<(NodeId, BackendError)>,
    /// Value prompts per child, in child order.
    pub prompts: Vec<(NodeId, String)>,
}

/// Scores every child of `parent`. Backend errors are recorded per child and
/// that child falls back to an LM score of 0; the rest are still scored.
pub fn evaluate_children(
    tree: &mut SearchTree,
    parent: NodeId,
    eval: &Evaluator<'_>,
    mut seed_for: impl FnMut(NodeId) -> u64,
) -> Result<EvalReport, TreeError> {
    let mut report = EvalReport::default();
    if eval.mode == ValueMode::None {
        return Ok(report);
    }
    let children = tree.node(parent)?.children.clone();
    if children.is_empty() {
        return Ok(report);
    }
    let siblings: Vec<ActionSample> = children
        .iter()
        .map(|&c| tree.node(c).map(|n| n.action.clone().expect("children carry actions")))
        .collect::<Result<_, _>>()?;

    for (i, &child) in children.iter().enumerate() {
        let sc = sc_score(&siblings, i);
        let score = match eval.mode {
            ValueMode::ScOnly => ValueScore {
                lm_score: 0.0,
                sc_score: sc,
                combined: sc,
                lm_raw: None,
            },
            _ => {
                let ctx = tree.reconstruct_context(child, eval.reflections)?;
                let (lm, raw) = match lm_score(&ctx, eval.template, eval.backend, seed_for(child)) {
                    Ok(s) => {
                        report.calls += s.calls;
                        report.prompts.push((child, s.prompt));
                        if s.flagged {
                            report.flagged.push(child);
                        }
                        (s.score, s.raw)
                    }
                    Err(e) => {
                        report.calls += 1;
                        report.flagged.push(child);
                        report.errors.push((child, e));
                        (0.0, None)
                    }
                };
                ValueScore {
                    lm_score: lm,
                    sc_score: sc,
                    combined: combine(lm, sc, eval.lambda).expect("scores are unit-range"),
                    lm_raw: raw,
                }
            }
        };
        tree.node_mut(child)?.eval_score = Some(score);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ActionKind, CountingBackend, ScriptedBackend};
    use crate::tree::ChildSpec;

    fn search(q: &str) -> ActionSample {
        ActionSample::command(ActionKind::EnvAction, "search", q)
    }

    #[test]
    fn combine_is_exact_affine_mix() {
        assert!((combine(0.8, 0.4, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(combine(0.3, 0.9, 1.0).unwrap(), 0.3);
        assert_eq!(combine(0.3, 0.9, 0.0).unwrap(), 0.9);
        assert!(combine(1.2, 0.1, 0.5).is_err());
        assert!(combine(0.2, 0.1, -0.5).is_err());
    }

    #[test]
    fn sc_counts_normalized_matches() {
        let sibs = vec![search("A"), search("B"), search(" A "), ActionSample::command(ActionKind::EnvAction, "SEARCH", "A"), search("C")];
        // by hand: A, A, A among 5
        assert!((sc_score(&sibs, 0) - 0.6).abs() < 1e-15);
        assert!((sc_score(&sibs, 1) - 0.2).abs() < 1e-15);
        assert_eq!(sc_score(&sibs[..1], 0), 1.0);
    }

    #[test]
    fn score_parsing_takes_last_and_clamps() {
        assert_eq!(parse_correctness_score("Thus the correctness score is 10"), Some(10));
        assert_eq!(parse_correctness_score("... score is 3"), None);
        assert_eq!(parse_correctness_score("correctness score is 3"), Some(3));
        assert_eq!(
            parse_correctness_score("example: correctness score is 9\nmine: Thus the correctness score is 4"),
            Some(4)
        );
        assert_eq!(parse_correctness_score("correctness score is 42"), Some(10));
        assert_eq!(parse_correctness_score("correctness score is 0"), Some(1));
        assert_eq!(parse_correctness_score("Correctness score is {7}"), Some(7));
    }

    fn ctx() -> StateContext {
        StateContext {
            input: "Question: q".into(),
            ..Default::default()
        }
    }

    #[test]
    fn lm_score_maps_to_unit_range() {
        let b = ScriptedBackend::from_pairs([("Question: q", vec!["Thus the correctness score is 10"])], "");
        let s = lm_score(&ctx(), &PromptBundle::default(), &b, 0).unwrap();
        assert_eq!((s.score, s.raw, s.flagged, s.calls), (1.0, Some(10), false, 1));
        let b = ScriptedBackend::from_pairs([("Question: q", vec!["The correctness score is 3"])], "");
        assert_eq!(lm_score(&ctx(), &PromptBundle::default(), &b, 0).unwrap().score, 0.3);
    }

    #[test]
    fn lm_score_fallback_after_retry() {
        let b = CountingBackend::new(ScriptedBackend::from_pairs([("x", vec!["y"])], "no score here"));
        let s = lm_score(&ctx(), &PromptBundle::default(), &b, 0).unwrap();
        assert_eq!((s.score, s.raw, s.flagged, s.calls), (0.0, None, true, 2));
        assert_eq!(b.calls(), 2);
    }

    fn tree_with(actions: Vec<ActionSample>) -> (SearchTree, Vec<NodeId>) {
        let mut t = SearchTree::new("Question: q");
        let ids = t
            .add_children(
                t.root(),
                actions
                    .into_iter()
                    .map(|a| ChildSpec {
                        action: a,
                        observation: "obs".into(),
                        is_terminal: false,
                        reward: None,
                    })
                    .collect(),
            )
            .unwrap();
        (t, ids)
    }

    #[test]
    fn full_mode_populates_scores() {
        let (mut t, ids) = tree_with((0..5).map(|i| search(&format!("e{i}"))).collect());
        let b = CountingBackend::new(ScriptedBackend::from_pairs(
            [("Question: q", vec!["Thus the correctness score is 8"])],
            "",
        ));
        let template = PromptBundle::default();
        let ev = Evaluator {
            mode: ValueMode::Full,
            lambda: 0.5,
            template: &template,
            backend: &b,
            reflections: &[],
        };
        let rep = evaluate_children(&mut t, NodeId::ROOT, &ev, |_| 0).unwrap();
        assert_eq!(rep.calls, 5);
        for id in ids {
            let s = t.node(id).unwrap().eval_score.clone().unwrap();
            assert!((s.combined - (0.5 * 0.8 + 0.5 * 0.2)).abs() < 1e-12);
            assert_eq!(s.lm_raw, Some(8));
        }
        assert_eq!(t.selection_stats(NodeId(1)).1, 1);
    }

    #[test]
    fn cheap_modes_make_no_calls() {
        let b = CountingBackend::new(ScriptedBackend::from_pairs([("q", vec!["x"])], ""));
        let template = PromptBundle::default();
        for mode in [ValueMode::ScOnly, ValueMode::None] {
            let (mut t, ids) = tree_with((0..5).map(|i| search(&format!("e{i}"))).collect());
            let ev = Evaluator {
                mode,
                lambda: 0.5,
                template: &template,
                backend: &b,
                reflections: &[],
            };
            evaluate_children(&mut t, NodeId::ROOT, &ev, |_| 0).unwrap();
            for id in ids {
                let n = t.node(id).unwrap();
                match mode {
                    ValueMode::ScOnly => assert_eq!(n.eval_score.as_ref().unwrap().combined, 0.2),
                    _ => {
                        assert!(n.eval_score.is_none());
                        assert_eq!(n.value, 0.0);
                    }
                }
            }
        }
        assert_eq!(b.calls(), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn permuting_siblings_keeps_score_multiset(
                picks in prop::collection::vec(0usize..4, 1..8),
                seed in any::<u64>(),
            ) {
                let pool = ["A", "B", "C", "D"];
                let sibs: Vec<ActionSample> = picks.iter().map(|&i| search(pool[i])).collect();
                let mut perm: Vec<usize> = (0..sibs.len()).collect();
                // deterministic shuffle from seed
                let mut s = seed;
                for i in (1..perm.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    perm.swap(i, (s >> 33) as usize % (i + 1));
                }
                let shuffled: Vec<ActionSample> = perm.iter().map(|&i| sibs[i].clone()).collect();
                let mut a: Vec<(String, u64)> = (0..sibs.len())
                    .map(|i| (sibs[i].raw.clone(), sc_score(&sibs, i).to_bits()))
                    .collect();
                let mut b: Vec<(String, u64)> = (0..shuffled.len())
                    .map(|i| (shuffled[i].raw.clone(), sc_score(&shuffled, i).to_bits()))
                    .collect();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn combined_stays_in_unit_range(lm in 0.0f64..=1.0, sc in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
                let c = combine(lm, sc, lambda).unwrap();
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
