use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Action;
use crate::prompts::ParseErrorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Triage,
    Leaf,
    /// Move into the only child of a node; no completion is requested.
    AutoDescend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    Summary,
    Segment,
}

/// One piece of dynamic prompt content and its token count as shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presented {
    pub node_id: String,
    pub content: Content,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Parse(ParseErrorKind),
    RevertAtRoot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResult {
    Action {
        action: Action,
        reasoning: Option<String>,
    },
    Invalid {
        reason: InvalidReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: usize,
    pub node_id: String,
    pub kind: StepKind,
    pub presented: Vec<Presented>,
    pub prompt_tokens: usize,
    pub response: Option<String>,
    pub result: StepResult,
    /// Node the walk is on after this step, when it moved.
    pub moved_to: Option<String>,
    pub timestamp: u64,
}

impl TrajectoryStep {
    pub fn is_prompted(&self) -> bool {
        self.kind != StepKind::AutoDescend
    }

    pub fn presented_tokens(&self) -> usize {
        self.presented.iter().map(|p| p.tokens).sum()
    }

    pub fn action(&self) -> Option<&Action> {
        match &self.result {
            StepResult::Action { action, .. } => Some(action),
            StepResult::Invalid { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoAnswerReason {
    InvalidStreak,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Answered { answer: String },
    NoAnswer { reason: NoAnswerReason },
}

impl Outcome {
    pub fn answer(&self) -> Option<&str> {
        match self {
            Outcome::Answered { answer } => Some(answer),
            Outcome::NoAnswer { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub strayed: bool,
    /// Set by the evaluation harness only.
    pub recovered: Option<bool>,
    /// Dynamic tokens over all prompted steps, repeated visits included.
    pub tokens_processed: usize,
    /// Dynamic tokens counting each distinct piece of content once.
    pub unique_tokens_processed: usize,
    pub original_tokens: usize,
    pub fraction_of_original: f64,
    pub unique_fraction_of_original: f64,
    /// Prompted steps (completions requested).
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationResult {
    pub outcome: Outcome,
    pub trajectory: Vec<TrajectoryStep>,
    pub metrics: TraceMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_trace_metrics(trajectory: &[TrajectoryStep], original_tokens: usize) -> TraceMetrics {
    let tokens_processed = trajectory.iter().map(TrajectoryStep::presented_tokens).sum();
    let mut unique: HashMap<(&str, Content), usize> = HashMap::new();
    for p in trajectory.iter().flat_map(|s| &s.presented) {
        let slot = unique.entry((p.node_id.as_str(), p.content)).or_default();
        *slot = (*slot).max(p.tokens);
    }
    let unique_tokens_processed = unique.values().sum();
    TraceMetrics {
        strayed: trajectory.iter().any(|s| s.action() == Some(&Action::Revert)),
        recovered: None,
        tokens_processed,
        unique_tokens_processed,
        original_tokens,
        fraction_of_original: ratio(tokens_processed, original_tokens),
        unique_fraction_of_original: ratio(unique_tokens_processed, original_tokens),
        steps: trajectory.iter().filter(|s| s.is_prompted()).count(),
    }
}

pub fn write_trajectory(path: &Path, trajectory: &[TrajectoryStep]) -> Result<()> {
    let mut out = Vec::new();
    for step in trajectory {
        serde_json::to_writer(&mut out, step)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryStep>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

const RULE: &str = "----------------------------------------";

/// Human-readable transcript: each prompted step with what was shown and
/// the raw response, and the moves between steps.
pub fn render_transcript(trajectory: &[TrajectoryStep]) -> String {
    let mut out = String::new();
    let mut moves: Vec<String> = Vec::new();
    let flush = |out: &mut String, moves: &mut Vec<String>| {
        if !moves.is_empty() {
            let _ = writeln!(out, "{RULE}\nLLM {}", moves.join(" then "));
            moves.clear();
        }
    };
    out.push_str("Navigation Trajectory\n");
    for step in trajectory {
        if step.kind == StepKind::AutoDescend {
            if let Some(to) = &step.moved_to {
                moves.push(format!("enters {to} (only child)"));
            }
            continue;
        }
        flush(&mut out, &mut moves);
        let kind = if step.kind == StepKind::Triage { "triage" } else { "leaf" };
        let _ = writeln!(out, "{RULE}\n[{}] {} prompt, step {}", step.node_id, kind, step.index + 1);
        for p in &step.presented {
            let what = match p.content {
                Content::Summary => "summary",
                Content::Segment => "segment",
            };
            let _ = writeln!(out, "  {what} of {} ({} tokens)", p.node_id, p.tokens);
        }
        out.push_str("Response:\n");
        for line in step.response.as_deref().unwrap_or("").lines() {
            let _ = writeln!(out, "  {line}");
        }
        match &step.result {
            StepResult::Action { action, .. } => {
                let _ = writeln!(out, "Parsed: {action}");
                match (action, &step.moved_to) {
                    (Action::Descend(_), Some(to)) => moves.push(format!("enters {to}")),
                    (Action::Revert, Some(to)) => moves.push(format!("reverts to {to}")),
                    _ => {}
                }
            }
            StepResult::Invalid { reason } => {
                let why = match reason {
                    InvalidReason::Parse(kind) => format!("{}", crate::prompts::ParseError { kind: kind.clone() }),
                    InvalidReason::RevertAtRoot => "revert at the root".to_string(),
                };
                let _ = writeln!(out, "Invalid: {why}; regenerating");
            }
        }
    }
    flush(&mut out, &mut moves);
    out.push_str(RULE);
    out.push('\n');
    match trajectory.last().and_then(TrajectoryStep::action) {
        Some(Action::Commit(answer)) => {
            let _ = writeln!(out, "Outcome: answered {answer}");
        }
        _ => out.push_str("Outcome: no answer\n"),
    }
    let metrics = compute_trace_metrics(trajectory, 0);
    let _ = writeln!(
        out,
        "Prompted steps: {}, strayed: {}, tokens presented: {}",
        metrics.steps,
        if metrics.strayed { "yes" } else { "no" },
        metrics.tokens_processed
    );
    out
}
