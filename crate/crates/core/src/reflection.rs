//! Verbal self-reflection on failed trajectories and the per-task memory
//! that feeds them back into later prompts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{assemble_reflection_prompt, render_trajectory, PolicyBackend, PromptBundle};
use crate::tree::StateContext;

/// Rewards at or above this count as success.
pub const SUCCESS_THRESHOLD: f64 = 1.0;

pub fn is_success(reward: f64) -> bool {
    reward >= SUCCESS_THRESHOLD - 1e-9
}

#[derive(Debug, Error, PartialEq)]
pub enum ReflectionError {
    #[error("reflection requested for a successful trajectory (reward {0})")]
    NotAFailure(f64),
    #[error("bad reflection record at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub task_id: String,
    pub trajectory_text: String,
    pub reward: f64,
    pub reflection: String,
    pub episode: usize,
    pub created_at: u64,
    /// Set when the backend failed and `reflection` is empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

/// Append-only reflection log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReflectionStore {
    records: Vec<ReflectionRecord>,
    clock: u64,
}

impl ReflectionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `rec`, stamping `created_at` from the store's own counter.
    pub fn record(&mut self, mut rec: ReflectionRecord) {
        rec.created_at = self.clock;
        self.clock += 1;
        self.records.push(rec);
    }

    /// The `m` newest records for `task_id`, oldest first.
    pub fn select(&self, task_id: &str, m: usize) -> Vec<&ReflectionRecord> {
        let mine: Vec<&ReflectionRecord> = self.records.iter().filter(|r| r.task_id == task_id).collect();
        let skip = mine.len().saturating_sub(m);
        mine.into_iter().skip(skip).collect()
    }

    pub fn records(&self) -> &[ReflectionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReflectionError> {
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ReflectionRecord = serde_json::from_str(line).map_err(|e| ReflectionError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.clock = store.clock.max(rec.created_at + 1);
            store.records.push(rec);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub text: String,
    pub prompt: String,
    /// The backend failed; `text` is empty.
    pub flagged: bool,
}

/// Asks the reflection backend for one completion about a failed trajectory.
pub fn generate_reflection(
    traj: &StateContext,
    reward: f64,
    template: &PromptBundle,
    backend: &dyn PolicyBackend,
    seed: u64,
) -> Result<Reflection, ReflectionError> {
    if is_success(reward) {
        return Err(ReflectionError::NotAFailure(reward));
    }
    let prompt = assemble_reflection_prompt(template, traj, reward);
    let (text, flagged) = match backend.propose(&prompt, 1, seed) {
        Ok(mut out) if !out.is_empty() => (out.swap_remove(0), false),
        _ => (String::new(), true),
    };
    Ok(Reflection { text, prompt, flagged })
}

/// Builds the record for a failed trajectory; `created_at` is assigned on
/// [`ReflectionStore::record`].
pub fn make_record(task_id: &str, traj: &StateContext, reward: f64, reflection: &Reflection, episode: usize) -> ReflectionRecord {
    ReflectionRecord {
        task_id: task_id.to_string(),
        trajectory_text: render_trajectory(traj),
        reward,
        reflection: reflection.text.clone(),
        episode,
        created_at: 0,
        flagged: reflection.flagged,
    }
}

/// Returns `bundle` with its reflection slots filled from `records`; failed
/// trajectories are filled only when `with_trajectories` is set (value
/// prompts). Flagged empty reflections are skipped.
pub fn inject(bundle: &PromptBundle, records: &[&ReflectionRecord], with_trajectories: bool) -> PromptBundle {
    let usable: Vec<&&ReflectionRecord> = records.iter().filter(|r| !r.flagged).collect();
    if usable.is_empty() {
        return bundle.clone();
    }
    let mut out = bundle.clone();
    out.reflections = usable.iter().map(|r| r.reflection.trim().to_string()).collect();
    if with_trajectories {
        out.failed_trajectories = usable.iter().map(|r| r.trajectory_text.clone()).collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ActionKind, ActionSample, BackendError, CountingBackend, ScriptedBackend};

    fn rec(task: &str, text: &str) -> ReflectionRecord {
        ReflectionRecord {
            task_id: task.into(),
            trajectory_text: format!("traj for {text}"),
            reward: 0.0,
            reflection: text.into(),
            episode: 0,
            created_at: 0,
            flagged: false,
        }
    }

    fn failed_ctx() -> StateContext {
        StateContext {
            input: "Question: q".into(),
            steps: vec![(
                ActionSample::command(ActionKind::FinalAnswer, "finish", "x"),
                Some("Answer is INCORRECT".into()),
            )],
            reflections: vec![],
        }
    }

    #[test]
    fn select_keeps_newest_oldest_first() {
        let mut s = ReflectionStore::new();
        for t in ["a", "b", "c"] {
            s.record(rec("T", t));
        }
        let got: Vec<_> = s.select("T", 2).iter().map(|r| r.reflection.as_str()).collect();
        assert_eq!(got, ["b", "c"]);
        assert!(ReflectionStore::new().select("T", 4).is_empty());
        assert!(s.select("other", 4).is_empty());
        assert_eq!(s.records()[2].created_at, 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut s = ReflectionStore::new();
        s.record(rec("T", "one"));
        s.record(rec("U", "two"));
        let back = ReflectionStore::from_jsonl(&s.to_jsonl()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            ReflectionStore::from_jsonl("{oops"),
            Err(ReflectionError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn generate_returns_text_verbatim() {
        let b = ScriptedBackend::from_pairs([("Reflection:", vec!["Search more broadly next time."])], "");
        let r = generate_reflection(&failed_ctx(), 0.0, &PromptBundle::default(), &b, 0).unwrap();
        assert_eq!(r.text, "Search more broadly next time.");
        assert!(!r.flagged);
        assert!(r.prompt.ends_with("Reflection:"));
    }

    #[test]
    fn success_is_rejected() {
        let b = ScriptedBackend::from_pairs([("x", vec!["y"])], "");
        assert_eq!(
            generate_reflection(&failed_ctx(), 1.0, &PromptBundle::default(), &b, 0),
            Err(ReflectionError::NotAFailure(1.0))
        );
    }

    struct Down;
    impl PolicyBackend for Down {
        fn propose(&self, _: &str, _: usize, _: u64) -> Result<Vec<String>, BackendError> {
            Err(BackendError::Malformed("down".into()))
        }
    }

    #[test]
    fn backend_failure_flags_empty_reflection() {
        let r = generate_reflection(&failed_ctx(), 0.0, &PromptBundle::default(), &Down, 0).unwrap();
        assert_eq!((r.text.as_str(), r.flagged), ("", true));
        let rec = make_record("T", &failed_ctx(), 0.0, &r, 1);
        assert!(rec.flagged);
        let bundle = PromptBundle::default();
        assert_eq!(inject(&bundle, &[&rec], true), bundle);
    }

    #[test]
    fn inject_fills_slots() {
        let header = "The following reflection(s) give a plan to avoid failing.";
        let bundle = PromptBundle {
            instruction: "Solve.".into(),
            reflections_header: Some(header.into()),
            ..Default::default()
        };
        assert_eq!(inject(&bundle, &[], true), bundle);

        let a = rec("T", "first");
        let b = rec("T", "second");
        let agent = inject(&bundle, &[&a], false);
        assert!(agent.render().contains(header));
        assert!(agent.failed_trajectories.is_empty());

        let value = inject(&bundle, &[&a, &b], true);
        let text = value.with_query("CONTEXT".into()).render();
        let (p1, p2, c) = (
            text.find("traj for first").unwrap(),
            text.find("traj for second").unwrap(),
            text.find("CONTEXT").unwrap(),
        );
        assert!(p1 < p2 && p2 < c);
        assert_eq!(inject(&bundle, &[&a, &b], true), inject(&bundle, &[&a, &b], true));
    }

    #[test]
    fn counting_backend_sees_one_call() {
        let b = CountingBackend::new(ScriptedBackend::from_pairs([("x", vec!["y"])], "plan"));
        generate_reflection(&failed_ctx(), 0.4, &PromptBundle::default(), &b, 0).unwrap();
        assert_eq!(b.calls(), 1);
    }
}
