//! Environment contract and the bundled desk-scale environments.

pub mod docqa;
pub mod expr;
pub mod game24;
pub mod shop;
pub mod solution;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ActionGrammar, ActionSample};

pub const INVALID_ACTION: &str = "Invalid action!";
pub const THOUGHT_ACK: &str = "OK.";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("snapshot belongs to task `{found}`, not `{expected}`")]
    ForeignSnapshot { expected: String, found: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("invalid task `{task_id}`: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    pub text: String,
    pub terminal: bool,
    pub reward: Option<f64>,
}

impl EnvObservation {
    pub fn ongoing(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            terminal: false,
            reward: None,
        }
    }

    pub fn terminal(text: impl Into<String>, reward: f64) -> Self {
        Self {
            text: text.into(),
            terminal: true,
            reward: Some(reward),
        }
    }

    pub fn ok() -> Self {
        Self::ongoing(THOUGHT_ACK)
    }

    pub fn invalid() -> Self {
        Self::ongoing(INVALID_ACTION)
    }
}

/// Serialized environment state tagged with the task it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub task_id: String,
    pub token: String,
}

impl EnvSnapshot {
    pub(crate) fn encode<T: Serialize>(task_id: &str, state: &T) -> Self {
        Self {
            task_id: task_id.to_string(),
            token: serde_json::to_string(state).expect("environment state serializes"),
        }
    }

    pub(crate) fn decode<T: DeserializeOwned>(&self, task_id: &str) -> Result<T, EnvError> {
        if self.task_id != task_id {
            return Err(EnvError::ForeignSnapshot {
                expected: task_id.to_string(),
                found: self.task_id.clone(),
            });
        }
        serde_json::from_str(&self.token).map_err(|e| EnvError::CorruptSnapshot(e.to_string()))
    }
}

/// A text environment that can be stepped, snapshotted and restored.
///
/// Stepping is deterministic given state and action. Thoughts always answer
/// `OK.`; anything the environment does not understand answers
/// `Invalid action!` without ending the episode.
pub trait Environment: Send {
    fn reset(&mut self) -> EnvObservation;
    fn step(&mut self, action: &ActionSample) -> EnvObservation;
    fn snapshot(&self) -> EnvSnapshot;
    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError>;
    fn grammar(&self) -> &ActionGrammar;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Game24,
    Docqa,
    Shop,
    Solution,
}

impl EnvKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_lowercase().as_str() {
            "game24" => Some(Self::Game24),
            "docqa" => Some(Self::Docqa),
            "shop" | "shopsim" => Some(Self::Shop),
            "solution" => Some(Self::Solution),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Game24 => "game24",
            Self::Docqa => "docqa",
            Self::Shop => "shop",
            Self::Solution => "solution",
        }
    }

    /// Mixing weight between LM score and self-consistency.
    pub fn default_lambda(self) -> f64 {
        match self {
            Self::Game24 | Self::Docqa => 0.5,
            Self::Shop | Self::Solution => 0.8,
        }
    }

    pub fn default_depth_limit(self) -> usize {
        match self {
            Self::Game24 => 5,
            Self::Docqa => 7,
            Self::Shop => 15,
            Self::Solution => 8,
        }
    }

    pub fn default_episodes(self) -> usize {
        match self {
            Self::Game24 | Self::Shop => 30,
            Self::Docqa => 50,
            Self::Solution => 8,
        }
    }

    /// Each solution action is a complete candidate, so simulation is skipped.
    pub fn default_skip_simulation(self) -> bool {
        self == Self::Solution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPayload {
    Game24 { numbers: [i64; 4] },
    Docqa(docqa::DocQaTask),
    Shop(shop::ShopTask),
    Solution(solution::SolutionTask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub payload: TaskPayload,
}

impl TaskSpec {
    pub fn kind(&self) -> EnvKind {
        match self.payload {
            TaskPayload::Game24 { .. } => EnvKind::Game24,
            TaskPayload::Docqa(_) => EnvKind::Docqa,
            TaskPayload::Shop(_) => EnvKind::Shop,
            TaskPayload::Solution(_) => EnvKind::Solution,
        }
    }

    pub fn game24(task_id: &str, numbers: [i64; 4]) -> Self {
        Self {
            task_id: task_id.to_string(),
            payload: TaskPayload::Game24 { numbers },
        }
    }

    /// The task input `x` as shown at the top of every prompt.
    pub fn input_text(&self) -> String {
        match &self.payload {
            TaskPayload::Game24 { numbers } => format!(
                "Input: {}",
                numbers.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
            ),
            TaskPayload::Docqa(t) => format!("Question: {}", t.question),
            TaskPayload::Shop(t) => format!("Instruction: {}", t.instruction.text),
            TaskPayload::Solution(t) => format!("Problem: {}", t.problem),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match &self.payload {
            TaskPayload::Game24 { numbers } => {
                if numbers.iter().all(|n| (1..=13).contains(n)) {
                    Ok(())
                } else {
                    Err(format!("numbers must be in 1..=13, got {numbers:?}"))
                }
            }
            TaskPayload::Docqa(t) => t.validate(),
            TaskPayload::Shop(t) => t.validate(),
            TaskPayload::Solution(t) => t.validate(),
        }
    }
}

/// Fresh environment for a task, already reset.
pub fn make_env(task: &TaskSpec) -> Box<dyn Environment> {
    let mut env: Box<dyn Environment> = match &task.payload {
        TaskPayload::Game24 { numbers } => Box::new(game24::Game24Env::new(&task.task_id, numbers)),
        TaskPayload::Docqa(t) => Box::new(docqa::DocQaEnv::new(&task.task_id, t.clone())),
        TaskPayload::Shop(t) => Box::new(shop::ShopEnv::new(&task.task_id, t.clone())),
        TaskPayload::Solution(t) => Box::new(solution::SolutionEnv::new(&task.task_id, t.clone())),
    };
    env.reset();
    env
}

pub fn grammar_for(kind: EnvKind) -> ActionGrammar {
    match kind {
        EnvKind::Game24 => game24::grammar(),
        EnvKind::Docqa => docqa::grammar(),
        EnvKind::Shop => shop::grammar(),
        EnvKind::Solution => solution::grammar(),
    }
}

// ---- task files ----

#[derive(Debug, Deserialize)]
struct TaskFile {
    task_id: String,
    kind: EnvKind,
    payload: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct Game24File {
    numbers: [i64; 4],
}

#[derive(Debug, Deserialize)]
struct DocQaFile {
    question: String,
    answer: String,
    #[serde(default)]
    corpus: Option<docqa::Corpus>,
    #[serde(default)]
    corpus_file: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ShopFile {
    instruction: shop::Instruction,
    #[serde(default)]
    catalog: Option<Vec<shop::Product>>,
    #[serde(default)]
    catalog_file: Option<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| EnvError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads tasks from a JSON file holding one task or an array of tasks, or
/// from a directory of such files (sorted by name). Corpus and catalog
/// references resolve relative to the task file and are shared between
/// tasks.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, EnvError> {
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|source| EnvError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut loader = Loader::default();
    let mut tasks = Vec::new();
    for file in files {
        let value: serde_json::Value = read_json(&file)?;
        let raw: Vec<TaskFile> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|t| vec![t])
        }
        .map_err(|source| EnvError::Json {
            path: file.clone(),
            source,
        })?;
        let base = file.parent().unwrap_or(Path::new("."));
        for t in raw {
            tasks.push(loader.resolve(t, base, &file)?);
        }
    }
    Ok(tasks)
}

#[derive(Default)]
struct Loader {
    corpora: Vec<(PathBuf, Arc<docqa::Corpus>)>,
    catalogs: Vec<(PathBuf, Arc<Vec<shop::Product>>)>,
}

impl Loader {
    fn corpus(&mut self, path: PathBuf) -> Result<Arc<docqa::Corpus>, EnvError> {
        if let Some((_, c)) = self.corpora.iter().find(|(p, _)| *p == path) {
            return Ok(c.clone());
        }
        let c: Arc<docqa::Corpus> = Arc::new(read_json(&path)?);
        self.corpora.push((path, c.clone()));
        Ok(c)
    }

    fn catalog(&mut self, path: PathBuf) -> Result<Arc<Vec<shop::Product>>, EnvError> {
        if let Some((_, c)) = self.catalogs.iter().find(|(p, _)| *p == path) {
            return Ok(c.clone());
        }
        let c: Arc<Vec<shop::Product>> = Arc::new(read_json(&path)?);
        self.catalogs.push((path, c.clone()));
        Ok(c)
    }

    fn resolve(&mut self, raw: TaskFile, base: &Path, file: &Path) -> Result<TaskSpec, EnvError> {
        let invalid = |reason: String| EnvError::InvalidTask {
            task_id: raw.task_id.clone(),
            reason,
        };
        let json_err = |source| EnvError::Json {
            path: file.to_path_buf(),
            source,
        };
        let payload = match raw.kind {
            EnvKind::Game24 => {
                let g: Game24File = serde_json::from_value(raw.payload.clone()).map_err(json_err)?;
                TaskPayload::Game24 { numbers: g.numbers }
            }
            EnvKind::Docqa => {
                let d: DocQaFile = serde_json::from_value(raw.payload.clone()).map_err(json_err)?;
                let corpus = match (d.corpus, d.corpus_file) {
                    (Some(c), _) => Arc::new(c),
                    (None, Some(f)) => self.corpus(base.join(f))?,
                    (None, None) => return Err(invalid("docqa task needs corpus or corpus_file".into())),
                };
                TaskPayload::Docqa(docqa::DocQaTask {
                    question: d.question,
                    answer: d.answer,
                    corpus,
                })
            }
            EnvKind::Shop => {
                let s: ShopFile = serde_json::from_value(raw.payload.clone()).map_err(json_err)?;
                let catalog = match (s.catalog, s.catalog_file) {
                    (Some(c), _) => Arc::new(c),
                    (None, Some(f)) => self.catalog(base.join(f))?,
                    (None, None) => return Err(invalid("shop task needs catalog or catalog_file".into())),
                };
                TaskPayload::Shop(shop::ShopTask {
                    instruction: s.instruction,
                    catalog,
                })
            }
            EnvKind::Solution => {
                let s: solution::SolutionTask = serde_json::from_value(raw.payload.clone()).map_err(json_err)?;
                TaskPayload::Solution(s)
            }
        };
        let task = TaskSpec {
            task_id: raw.task_id.clone(),
            payload,
        };
        task.validate().map_err(invalid)?;
        Ok(task)
    }
}

/// Directory holding the bundled task suites.
pub fn bundled_data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// Path of the bundled suite for an environment kind.
pub fn bundled_suite(kind: EnvKind) -> PathBuf {
    bundled_data_dir().join(format!("{}_tasks.json", kind.name()))
}
