//! Multi-hop question answering over a local corpus of titled pages.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EnvError, EnvObservation, EnvSnapshot, Environment};
use crate::policy::{ActionGrammar, ActionSample, TerminalRule};

const SEARCH_SENTENCES: usize = 5;
const SIMILAR_LIMIT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub entities: Vec<Entity>,
}

impl Corpus {
    pub fn find(&self, title: &str) -> Option<&Entity> {
        let t = title.trim();
        self.entities.iter().find(|e| e.title.eq_ignore_ascii_case(t))
    }

    /// Titles ranked by character-trigram Jaccard similarity to `query`,
    /// ties broken alphabetically. Zero-overlap titles are dropped.
    pub fn similar(&self, query: &str, limit: usize) -> Vec<&str> {
        let q = trigrams(query);
        let mut scored: Vec<(f64, &str)> = self
            .entities
            .iter()
            .map(|e| (jaccard(&q, &trigrams(&e.title)), e.title.as_str()))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(limit).map(|(_, t)| t).collect()
    }
}

fn trigrams(s: &str) -> BTreeSet<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let padded: Vec<char> = format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
        .chars()
        .collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exact-match normalization: lowercase, drop punctuation and the articles
/// a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let no_punct: String = s
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocQaTask {
    pub question: String,
    pub answer: String,
    pub corpus: Arc<Corpus>,
}

impl DocQaTask {
    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err("question and answer must be non-empty".into());
        }
        if self.corpus.entities.is_empty() {
            return Err("corpus is empty".into());
        }
        Ok(())
    }
}

pub fn grammar() -> ActionGrammar {
    ActionGrammar::new(vec![
        ActionGrammar::verb("search", TerminalRule::Never),
        ActionGrammar::verb("lookup", TerminalRule::Never),
        ActionGrammar::verb("finish", TerminalRule::Always),
    ])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct State {
    page: Option<String>,
    keyword: Option<String>,
    cursor: usize,
    done: bool,
}

pub struct DocQaEnv {
    task_id: String,
    task: DocQaTask,
    state: State,
    grammar: ActionGrammar,
}

impl DocQaEnv {
    pub fn new(task_id: &str, task: DocQaTask) -> Self {
        Self {
            task_id: task_id.to_string(),
            task,
            state: State::default(),
            grammar: grammar(),
        }
    }

    fn search(&mut self, query: &str) -> EnvObservation {
        self.state.keyword = None;
        self.state.cursor = 0;
        match self.task.corpus.find(query) {
            Some(e) => {
                self.state.page = Some(e.title.clone());
                let head: Vec<&str> = e.sentences.iter().take(SEARCH_SENTENCES).map(String::as_str).collect();
                EnvObservation::ongoing(head.join(" "))
            }
            None => {
                self.state.page = None;
                let similar = self.task.corpus.similar(query, SIMILAR_LIMIT);
                EnvObservation::ongoing(format!(
                    "Could not find {}. Similar: {}.",
                    query.trim(),
                    similar.join(", ")
                ))
            }
        }
    }

    fn lookup(&mut self, keyword: &str) -> EnvObservation {
        let Some(page) = self.state.page.clone() else {
            return EnvObservation::invalid();
        };
        let entity = self.task.corpus.find(&page).expect("page titles come from the corpus");
        let kw = keyword.trim().to_lowercase();
        if self.state.keyword.as_deref() != Some(kw.as_str()) {
            self.state.keyword = Some(kw.clone());
            self.state.cursor = 0;
        }
        let hits: Vec<&String> = entity
            .sentences
            .iter()
            .filter(|s| s.to_lowercase().contains(&kw))
            .collect();
        if self.state.cursor >= hits.len() {
            return EnvObservation::ongoing("No more results.");
        }
        let i = self.state.cursor;
        self.state.cursor += 1;
        EnvObservation::ongoing(format!("(Result {} / {}) {}", i + 1, hits.len(), hits[i]))
    }
}

impl Environment for DocQaEnv {
    fn reset(&mut self) -> EnvObservation {
        self.state = State::default();
        EnvObservation::ongoing(format!("Question: {}", self.task.question))
    }

    fn step(&mut self, action: &ActionSample) -> EnvObservation {
        if action.is_thought() {
            return EnvObservation::ok();
        }
        if self.state.done {
            return EnvObservation::invalid();
        }
        let arg = action.argument.as_deref().unwrap_or("");
        match action.verb.as_deref() {
            Some("search") => self.search(arg),
            Some("lookup") => self.lookup(arg),
            Some("finish") => {
                self.state.done = true;
                if normalize_answer(arg) == normalize_answer(&self.task.answer) {
                    EnvObservation::terminal("Answer is CORRECT", 1.0)
                } else {
                    EnvObservation::terminal("Answer is INCORRECT", 0.0)
                }
            }
            _ => EnvObservation::invalid(),
        }
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
