//! Action proposal: action types, text parsing, prompt assembly and the
//! backends that generate candidate steps.

mod backend;
mod http;
mod oracle24;
mod prompt;

pub use backend::{BackendError, CountingBackend, PolicyBackend, ScriptEntry, ScriptedBackend};
pub use http::{HttpChatBackend, HttpChatConfig};
pub use oracle24::{Oracle24Backend, Oracle24Valuer};
pub use prompt::{
    assemble_acting_prompt, assemble_reasoning_prompt, assemble_reflection_prompt, assemble_value_prompt,
    render_trajectory, PromptBundle, TemplateError,
};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Thought,
    EnvAction,
    FinalAnswer,
}

/// A single proposed step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSample {
    pub kind: ActionKind,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument: Option<String>,
}

impl ActionSample {
    pub fn thought(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::Thought,
            raw: text.into(),
            verb: None,
            argument: None,
        }
    }

    /// Builds a bracket command, e.g. `search[query]`. `verb` is stored
    /// lowercase.
    pub fn command(kind: ActionKind, verb: &str, argument: impl Into<String>) -> Self {
        let verb = verb.to_lowercase();
        let argument = argument.into();
        Self {
            kind,
            raw: format!("{verb}[{argument}]"),
            verb: Some(verb),
            argument: Some(argument),
        }
    }

    pub fn is_thought(&self) -> bool {
        self.kind == ActionKind::Thought
    }

    /// Thought text with any leading `Thought N:` label removed.
    pub fn thought_text(&self) -> &str {
        strip_label(&self.raw, "thought")
    }

    /// Comparison key for self-consistency: trimmed, whitespace collapsed,
    /// verb case-folded.
    pub fn normalized(&self) -> String {
        match (&self.verb, &self.argument) {
            (Some(v), Some(a)) if !self.is_thought() => {
                format!("{}[{}]", v.to_lowercase(), collapse_ws(a))
            }
            _ => collapse_ws(self.thought_text()),
        }
    }
}

pub(crate) fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// When a bracket command ends the episode on its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalRule {
    Never,
    Always,
    /// Terminal only for this argument (case-insensitive), e.g. `Buy Now`.
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbSpec {
    pub name: String,
    pub terminal: TerminalRule,
    /// Commands with this verb are free-form thoughts, e.g. `think[...]`.
    #[serde(default)]
    pub thought: bool,
}

/// The bracket commands an environment understands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionGrammar {
    pub verbs: Vec<VerbSpec>,
}

impl ActionGrammar {
    pub fn new(verbs: Vec<VerbSpec>) -> Self {
        Self { verbs }
    }

    pub fn verb(name: &str, terminal: TerminalRule) -> VerbSpec {
        VerbSpec {
            name: name.to_lowercase(),
            terminal,
            thought: false,
        }
    }

    pub fn thought_verb(name: &str) -> VerbSpec {
        VerbSpec {
            name: name.to_lowercase(),
            terminal: TerminalRule::Never,
            thought: true,
        }
    }

    pub fn lookup(&self, verb: &str) -> Option<&VerbSpec> {
        let verb = verb.to_lowercase();
        self.verbs.iter().find(|v| v.name == verb)
    }

    fn kind_for(&self, spec: &VerbSpec, argument: &str) -> ActionKind {
        if spec.thought {
            return ActionKind::Thought;
        }
        match &spec.terminal {
            TerminalRule::Never => ActionKind::EnvAction,
            TerminalRule::Always => ActionKind::FinalAnswer,
            TerminalRule::Argument(a) if a.eq_ignore_ascii_case(argument.trim()) => ActionKind::FinalAnswer,
            TerminalRule::Argument(_) => ActionKind::EnvAction,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty action text")]
    Empty,
    #[error("malformed command for verb `{verb}`: {raw}")]
    Malformed { verb: String, raw: String },
}

impl ParseError {
    /// The offending text, for turning into an invalid-action thought.
    pub fn raw(&self) -> &str {
        match self {
            ParseError::Empty => "",
            ParseError::Malformed { raw, .. } => raw,
        }
    }
}

static COMMAND: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)^([A-Za-z_]+)\s*\[(.*)\]$").unwrap());
static LEADING_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_]+)").unwrap());

fn strip_label<'a>(text: &'a str, label: &str) -> &'a str {
    let t = text.trim();
    let lower = t.to_lowercase();
    if !lower.starts_with(label) {
        return t;
    }
    let rest = &t[label.len()..];
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
    match rest.strip_prefix(':') {
        Some(r) => r.trim(),
        None => t,
    }
}

/// Parses one line of model output against an environment grammar.
///
/// `Verb[argument]` forms whose verb the grammar declares become commands;
/// anything else (including `Thought ...` lines) is a thought. A declared
/// verb with broken brackets is a [`ParseError::Malformed`].
pub fn parse_action(raw: &str, grammar: &ActionGrammar) -> Result<ActionSample, ParseError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(ParseError::Empty);
    }
    let lower = text.to_lowercase();
    if lower.starts_with("thought") {
        return Ok(ActionSample::thought(text));
    }
    let body = strip_label(text, "action");
    if let Some(caps) = COMMAND.captures(body) {
        let verb = &caps[1];
        let argument = &caps[2];
        if let Some(spec) = grammar.lookup(verb) {
            if argument.contains(['[', ']']) {
                return Err(ParseError::Malformed {
                    verb: spec.name.clone(),
                    raw: text.to_string(),
                });
            }
            let kind = grammar.kind_for(spec, argument);
            if kind == ActionKind::Thought {
                return Ok(ActionSample::thought(argument.trim()));
            }
            return Ok(ActionSample {
                kind,
                raw: body.to_string(),
                verb: Some(spec.name.clone()),
                argument: Some(argument.trim().to_string()),
            });
        }
        return Ok(ActionSample::thought(text));
    }
    if let Some(word) = LEADING_WORD.captures(body) {
        let after = body[word[1].len()..].trim_start();
        if grammar.lookup(&word[1]).is_some() && (after.starts_with('[') || after.is_empty() || body.contains(']')) {
            return Err(ParseError::Malformed {
                verb: word[1].to_lowercase(),
                raw: text.to_string(),
            });
        }
    }
    Ok(ActionSample::thought(text))
}
