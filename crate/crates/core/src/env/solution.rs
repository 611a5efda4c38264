//! Programming-task analog: every `submit[expr]` is a complete candidate and
//! ends the episode with the fraction of internal tests it passes.

use serde::{Deserialize, Serialize};

use super::expr;
use super::{EnvError, EnvObservation, EnvSnapshot, Environment};
use crate::policy::{ActionGrammar, ActionSample, TerminalRule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionTask {
    pub problem: String,
    /// `(input, expected output)` pairs.
    pub tests: Vec<(i64, i64)>,
}

impl SolutionTask {
    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.tests.is_empty() {
            return Err("solution task needs at least one test".into());
        }
        Ok(())
    }

    /// Fraction of tests passed; 0 for candidates that do not parse.
    pub fn score(&self, candidate: &str) -> (f64, usize) {
        let Ok(e) = expr::parse(candidate) else {
            return (0.0, 0);
        };
        let passed = self
            .tests
            .iter()
            .filter(|(input, want)| e.eval(*input).ok() == Some(*want))
            .count();
        (passed as f64 / self.tests.len() as f64, passed)
    }
}

pub fn grammar() -> ActionGrammar {
    ActionGrammar::new(vec![ActionGrammar::verb("submit", TerminalRule::Always)])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct State {
    done: bool,
}

pub struct SolutionEnv {
    task_id: String,
    task: SolutionTask,
    state: State,
    grammar: ActionGrammar,
}

impl SolutionEnv {
    pub fn new(task_id: &str, task: SolutionTask) -> Self {
        Self {
            task_id: task_id.to_string(),
            task,
            state: State::default(),
            grammar: grammar(),
        }
    }
}

impl Environment for SolutionEnv {
    fn reset(&mut self) -> EnvObservation {
        self.state = State::default();
        EnvObservation::ongoing(format!("Problem: {}", self.task.problem))
    }

    fn step(&mut self, action: &ActionSample) -> EnvObservation {
        if action.is_thought() {
            return EnvObservation::ok();
        }
        if self.state.done || action.verb.as_deref() != Some("submit") {
            return EnvObservation::invalid();
        }
        self.state.done = true;
        let candidate = action.argument.as_deref().unwrap_or("");
        let (reward, passed) = self.task.score(candidate);
        EnvObservation::terminal(
            format!("Passed {passed}/{} internal tests.", self.task.tests.len()),
            reward,
        )
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot::encode(&self.task_id, &self.state)
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        self.state = snapshot.decode(&self.task_id)?;
        Ok(())
    }

    fn grammar(&self) -> &ActionGrammar {
        &self.grammar
    }
}
