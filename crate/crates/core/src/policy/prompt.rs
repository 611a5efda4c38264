use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionKind, ActionSample};
use crate::tree::StateContext;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("line {line}: unknown template slot `{slot}`")]
    UnknownSlot { line: usize, slot: String },
    #[error("line {0}: text before the first slot header")]
    Orphan(usize),
    #[error("template has no instruction slot")]
    MissingInstruction,
}

/// The pieces of a prompt. Rendering order is fixed: instruction, few-shot
/// examples, memory (header, failed trajectories, reflections), then the
/// query.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub few_shot: Vec<String>,
    pub reflections_header: Option<String>,
    pub reflections: Vec<String>,
    pub failed_trajectories: Vec<String>,
    pub query: String,
}

impl PromptBundle {
    /// Parses a template file. Slots are introduced by `### <name>` lines;
    /// `example` may repeat.
    ///
    /// ```text
    /// ### instruction
    /// Solve the task.
    /// ### example
    /// Input: 1 2 3 4
    /// ### reflections_header
    /// Earlier attempts failed.
    /// ```
    pub fn from_template_str(text: &str) -> Result<Self, TemplateError> {
        let mut bundle = PromptBundle::default();
        let mut current: Option<(String, Vec<&str>)> = None;
        let mut saw_instruction = false;

        let flush = |slot: Option<(String, Vec<&str>)>, bundle: &mut PromptBundle| {
            if let Some((name, lines)) = slot {
                let body = lines.join("\n").trim().to_string();
                match name.as_str() {
                    "instruction" => bundle.instruction = body,
                    "example" => bundle.few_shot.push(body),
                    "reflections_header" => bundle.reflections_header = Some(body),
                    _ => unreachable!("slot names checked on entry"),
                }
            }
        };

        for (i, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("### ") {
                let name = name.trim().to_string();
                if !matches!(name.as_str(), "instruction" | "example" | "reflections_header") {
                    return Err(TemplateError::UnknownSlot { line: i + 1, slot: name });
                }
                saw_instruction |= name == "instruction";
                flush(current.take(), &mut bundle);
                current = Some((name, Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() {
                return Err(TemplateError::Orphan(i + 1));
            }
        }
        flush(current.take(), &mut bundle);
        if !saw_instruction {
            return Err(TemplateError::MissingInstruction);
        }
        Ok(bundle)
    }

    pub fn with_query(mut self, query: String) -> Self {
        self.query = query;
        self
    }

    /// Adds context reflections not already carried by the bundle.
    fn merge_reflections(mut self, extra: &[String]) -> Self {
        for r in extra {
            if !self.reflections.contains(r) {
                self.reflections.push(r.clone());
            }
        }
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.instruction.trim_end());
        out.push_str("\n\n");
        if !self.few_shot.is_empty() {
            out.push_str("Here are some examples:\n\n");
            for ex in &self.few_shot {
                out.push_str(ex.trim_end());
                out.push_str("\n\n");
            }
        }
        if !self.reflections.is_empty() || !self.failed_trajectories.is_empty() {
            if let Some(h) = &self.reflections_header {
                out.push_str(h.trim_end());
                out.push_str("\n\n");
            }
            for t in &self.failed_trajectories {
                out.push_str("Previous trial:\n");
                out.push_str(t.trim_end());
                out.push_str("\n\n");
            }
            for (i, r) in self.reflections.iter().enumerate() {
                out.push_str(&format!("Reflection {}: {}\n", i + 1, r.trim()));
            }
            if !self.reflections.is_empty() {
                out.push('\n');
            }
        }
        out.push_str(&self.query);
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Style {
    Acting,
    Reasoning,
}

fn render_steps(ctx: &StateContext, style: Style) -> (String, Option<String>) {
    let mut out = String::new();
    out.push_str(ctx.input.trim_end());
    out.push('\n');
    let mut idx = 1usize;
    let mut prev_thought = false;
    let mut thought_no = 0usize;
    for (action, obs) in &ctx.steps {
        match (action.kind, style) {
            (ActionKind::Thought, Style::Acting) => {
                if prev_thought {
                    idx += 1;
                }
                out.push_str(&format!("Thought {idx}: {}\n", action.thought_text()));
                if let Some(o) = obs.as_deref().filter(|o| *o != "OK.") {
                    out.push_str(&format!("Observation {idx}: {o}\n"));
                }
                prev_thought = true;
            }
            (ActionKind::Thought, Style::Reasoning) => {
                thought_no += 1;
                out.push_str(&format!("Thought {thought_no}: {}\n", action.thought_text()));
                prev_thought = true;
            }
            (ActionKind::FinalAnswer, Style::Reasoning) => {
                out.push_str(&format!("Action: {}\n", display_command(action)));
                prev_thought = false;
            }
            (_, _) => {
                out.push_str(&format!("Action {idx}: {}\n", action.raw));
                if let Some(o) = obs {
                    out.push_str(&format!("Observation {idx}: {o}\n"));
                }
                idx += 1;
                prev_thought = false;
            }
        }
    }
    let cue = if ctx.steps.is_empty() {
        None
    } else {
        Some(match (style, prev_thought) {
            (Style::Acting, true) => format!("Action {idx}:"),
            (Style::Acting, false) => format!("Thought {idx}:"),
            (Style::Reasoning, true) => "Action:".to_string(),
            (Style::Reasoning, false) => format!("Thought {}:", thought_no + 1),
        })
    };
    (out, cue)
}

/// `finish[x]` rendered with a capitalized verb, as exemplars write it.
fn display_command(a: &ActionSample) -> String {
    match (&a.verb, &a.argument) {
        (Some(v), Some(arg)) => {
            let mut cs = v.chars();
            let head: String = cs.next().map(|c| c.to_uppercase().collect()).unwrap_or_default();
            format!("{head}{}[{arg}]", cs.as_str())
        }
        _ => a.raw.clone(),
    }
}

/// Trajectory as Thought/Action/Observation lines, without a cue.
pub fn render_trajectory(ctx: &StateContext) -> String {
    render_steps(ctx, Style::Acting).0
}

fn with_cue(body: String, cue: Option<String>) -> String {
    match cue {
        Some(c) => format!("{body}{c}"),
        None => body,
    }
}

pub fn assemble_acting_prompt(template: &PromptBundle, ctx: &StateContext) -> String {
    let (body, cue) = render_steps(ctx, Style::Acting);
    template
        .clone()
        .merge_reflections(&ctx.reflections)
        .with_query(with_cue(body, cue))
        .render()
}

pub fn assemble_reasoning_prompt(template: &PromptBundle, ctx: &StateContext) -> String {
    let (body, cue) = render_steps(ctx, Style::Reasoning);
    template
        .clone()
        .merge_reflections(&ctx.reflections)
        .with_query(with_cue(body, cue))
        .render()
}

/// Value prompt: the trajectory so far (including the latest observation)
/// for the model to score.
pub fn assemble_value_prompt(template: &PromptBundle, ctx: &StateContext) -> String {
    template
        .clone()
        .merge_reflections(&ctx.reflections)
        .with_query(render_trajectory(ctx))
        .render()
}

/// Reflection prompt for a finished, failed trajectory.
pub fn assemble_reflection_prompt(template: &PromptBundle, ctx: &StateContext, reward: f64) -> String {
    let query = format!(
        "Previous trial:\n{}\nSTATUS: FAIL (reward {reward:.2})\n\nReflection:",
        render_trajectory(ctx)
    );
    template.clone().with_query(query).render()
}
