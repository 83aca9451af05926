//! Query-time walk over a memory tree: triage prompts at internal nodes,
//! leaf prompts at segments, with revert, regeneration on invalid output and
//! a path-scoped working memory.

mod memory;
mod trajectory;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::llm::{now_millis, CompletionRequest, LlmClient};
use crate::model::{Action, MemoryTree, TreeNode};
use crate::prompts::{parse_response, NodeKind, PromptSet};
use crate::tokenize::{truncate, Side};

pub use memory::{update_working_memory, MemoryEntry, WorkingMemory};
pub use trajectory::{
    compute_trace_metrics, read_trajectory, render_transcript, write_trajectory, Content,
    InvalidReason, NavigationResult, NoAnswerReason, Outcome, Presented, StepKind, StepResult,
    TraceMetrics, TrajectoryStep,
};

pub trait Clock: Send + Sync {
    fn now_millis(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        now_millis()
    }
}

/// Deterministic clock that ticks by one on every reading.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn starting_at(t: u64) -> Self {
        ManualClock(AtomicU64::new(t))
    }
}

impl Clock for ManualClock {
    fn now_millis(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

/// A failure that stopped the walk, with the steps completed before it.
#[derive(Debug, Error)]
#[error("navigation aborted after {} steps: {source}", .trajectory.len())]
pub struct NavigateError {
    pub source: Error,
    pub trajectory: Vec<TrajectoryStep>,
}

impl From<NavigateError> for Error {
    fn from(e: NavigateError) -> Self {
        e.source
    }
}

/// Mutable walk state for one query.
#[derive(Debug, Clone, Default)]
pub struct NavigationState {
    /// Node ids from the root to the current node.
    pub path: Vec<String>,
    pub working_memory: WorkingMemory,
    pub invalid_streak: usize,
    pub steps_taken: usize,
    pub trajectory: Vec<TrajectoryStep>,
}

impl NavigationState {
    pub fn current(&self) -> &str {
        self.path.last().expect("path always holds the root")
    }
}

pub struct Navigator<'a> {
    tree: &'a MemoryTree,
    client: &'a LlmClient,
    config: Config,
    prompts: PromptSet,
    clock: Arc<dyn Clock>,
}

impl<'a> Navigator<'a> {
    pub fn new(tree: &'a MemoryTree, client: &'a LlmClient, config: &Config) -> Result<Self> {
        config.validate(client.tokenizer())?;
        if tree.root().is_none() {
            return Err(Error::InvalidInput(format!("tree root {} is missing", tree.root_id)));
        }
        Ok(Navigator {
            tree,
            client,
            config: config.resolved(),
            prompts: PromptSet::from_config(config)?,
            clock: Arc::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    fn limit(&self) -> usize {
        self.config.context_window - self.config.generation_reserve
    }

    fn node(&self, id: &str) -> &'a TreeNode {
        self.tree.node(id).expect("path holds tree nodes")
    }

    fn memory_entry(&self, node: &TreeNode) -> MemoryEntry {
        MemoryEntry::new(self.client.tokenizer(), node.id.clone(), node.summary.clone())
    }

    /// Triage prompt over the children, cutting the longest summary while
    /// the prompt is over budget.
    fn triage_prompt(&self, query: &str, node: &TreeNode) -> Result<(String, Vec<Presented>)> {
        let tok = self.client.tokenizer();
        let mut summaries: Vec<String> =
            node.children.iter().map(|c| self.node(c).summary.clone()).collect();
        loop {
            let prompt = self
                .prompts
                .render_triage(query, &summaries, self.config.reasoning_enabled)?;
            let count = tok.count(&prompt);
            if count <= self.limit() {
                let presented = node
                    .children
                    .iter()
                    .zip(&summaries)
                    .map(|(id, s)| Presented {
                        node_id: id.clone(),
                        content: Content::Summary,
                        tokens: tok.count(s),
                    })
                    .collect();
                return Ok((prompt, presented));
            }
            let excess = count - self.limit();
            let (i, longest) = summaries
                .iter()
                .map(|s| tok.count(s))
                .enumerate()
                .max_by_key(|&(i, n)| (n, std::cmp::Reverse(i)))
                .expect("at least two children");
            if longest == 0 {
                return Err(Error::InvalidInput("query does not fit the context window".into()));
            }
            summaries[i] = truncate(tok, &summaries[i], longest.saturating_sub(excess), Side::KeepLeft);
        }
    }

    /// Leaf prompt with the ancestors' memory. Over budget, the oldest memory
    /// entries go first, then the last one is cut keeping its end, then the
    /// segment is cut keeping its start.
    fn leaf_prompt(
        &self,
        query: &str,
        options: Option<&[String]>,
        node: &TreeNode,
        memory: &WorkingMemory,
    ) -> Result<(String, Vec<Presented>)> {
        let tok = self.client.tokenizer();
        let segment = node
            .segment_index
            .and_then(|i| self.tree.segment(i))
            .ok_or_else(|| Error::InvalidInput(format!("leaf {} has no segment", node.id)))?;
        let mut mem: Vec<(String, String)> = memory
            .entries_except(&node.id)
            .into_iter()
            .map(|e| (e.node_id.clone(), e.text.clone()))
            .collect();
        let mut text = segment.text.clone();
        loop {
            let joined = mem.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n");
            let background = (!joined.trim().is_empty()).then_some(joined.as_str());
            let prompt = self.prompts.render_leaf(
                query,
                options,
                &text,
                background,
                self.config.reasoning_enabled,
            )?;
            let count = tok.count(&prompt);
            if count <= self.limit() {
                let mut presented: Vec<Presented> = mem
                    .iter()
                    .map(|(id, t)| Presented {
                        node_id: id.clone(),
                        content: Content::Summary,
                        tokens: tok.count(t),
                    })
                    .filter(|p| p.tokens > 0)
                    .collect();
                presented.push(Presented {
                    node_id: node.id.clone(),
                    content: Content::Segment,
                    tokens: tok.count(&text),
                });
                return Ok((prompt, presented));
            }
            let excess = count - self.limit();
            if mem.len() > 1 {
                mem.remove(0);
                continue;
            }
            if let Some((_, t)) = mem.first_mut() {
                let n = tok.count(t);
                if n > 0 {
                    *t = truncate(tok, t, n.saturating_sub(excess), Side::KeepRight);
                    if t.trim().is_empty() {
                        mem.clear();
                    }
                    continue;
                }
                mem.clear();
            }
            let n = tok.count(&text);
            if n <= excess {
                return Err(Error::InvalidInput(
                    "query and options do not fit the context window".into(),
                ));
            }
            text = truncate(tok, &text, n - excess, Side::KeepLeft);
        }
    }

    pub fn navigate(
        &self,
        query: &str,
        options: Option<&[String]>,
    ) -> std::result::Result<NavigationResult, NavigateError> {
        let mut state = NavigationState {
            path: vec![self.tree.root_id.clone()],
            ..NavigationState::default()
        };
        match self.run(&mut state, query, options) {
            Ok(outcome) => {
                let metrics = compute_trace_metrics(&state.trajectory, self.tree.document_tokens());
                Ok(NavigationResult {
                    outcome,
                    trajectory: state.trajectory,
                    metrics,
                })
            }
            Err(source) => Err(NavigateError {
                source,
                trajectory: state.trajectory,
            }),
        }
    }

    fn run(&self, state: &mut NavigationState, query: &str, options: Option<&[String]>) -> Result<Outcome> {
        if query.trim().is_empty() {
            return Err(Error::InvalidInput("query is empty".into()));
        }
        let tok = self.client.tokenizer();
        let max_steps = self.config.max_steps_for(self.tree.node_count());
        let memory_budget = self.config.working_memory_budget();
        let window = self.config.context_window;
        let reserve = self.config.generation_reserve;
        loop {
            let node = self.node(state.current());
            if !node.is_leaf() && node.children.len() == 1 {
                let child = self.node(&node.children[0]);
                state.path.push(child.id.clone());
                state.working_memory.push(self.memory_entry(child), memory_budget);
                state.trajectory.push(TrajectoryStep {
                    index: state.trajectory.len(),
                    node_id: node.id.clone(),
                    kind: StepKind::AutoDescend,
                    presented: Vec::new(),
                    prompt_tokens: 0,
                    response: None,
                    result: StepResult::Action {
                        action: Action::Descend(0),
                        reasoning: None,
                    },
                    moved_to: Some(child.id.clone()),
                    timestamp: self.clock.now_millis(),
                });
                continue;
            }
            if state.steps_taken >= max_steps {
                return Ok(Outcome::NoAnswer {
                    reason: NoAnswerReason::StepLimit,
                });
            }
            let (kind, node_kind, (prompt, presented)) = if node.is_leaf() {
                let p = self.leaf_prompt(query, options, node, &state.working_memory)?;
                (StepKind::Leaf, NodeKind::Leaf, p)
            } else {
                (StepKind::Triage, NodeKind::NonLeaf, self.triage_prompt(query, node)?)
            };
            let prompt_tokens = tok.count(&prompt);
            if prompt_tokens + reserve > window {
                return Err(Error::InvalidInput(format!(
                    "prompt of {prompt_tokens} tokens leaves no room for generation"
                )));
            }
            let tag = if node.is_leaf() { "leaf" } else { "triage" };
            let request = CompletionRequest::new(prompt, self.config.sampling(), tag);
            let raw = self.client.complete(&request)?;
            state.steps_taken += 1;

            let mut moved_to = None;
            let result = match parse_response(&raw, node_kind, node.children.len()) {
                Err(e) => StepResult::Invalid {
                    reason: InvalidReason::Parse(e.kind),
                },
                Ok(parsed) if parsed.action == Action::Revert && state.path.len() == 1 => {
                    StepResult::Invalid {
                        reason: InvalidReason::RevertAtRoot,
                    }
                }
                Ok(parsed) => {
                    match &parsed.action {
                        Action::Descend(i) => {
                            let child = self.node(&node.children[*i]);
                            state.path.push(child.id.clone());
                            state.working_memory.push(self.memory_entry(child), memory_budget);
                            moved_to = Some(child.id.clone());
                        }
                        Action::Revert => {
                            self.pop(state);
                            while state.path.len() > 1 && self.node(state.current()).children.len() == 1 {
                                self.pop(state);
                            }
                            moved_to = Some(state.current().to_string());
                        }
                        Action::Commit(_) => {}
                    }
                    StepResult::Action {
                        action: parsed.action,
                        reasoning: parsed.reasoning,
                    }
                }
            };
            let valid = matches!(result, StepResult::Action { .. });
            let committed = match &result {
                StepResult::Action {
                    action: Action::Commit(a),
                    ..
                } => Some(a.clone()),
                _ => None,
            };
            state.trajectory.push(TrajectoryStep {
                index: state.trajectory.len(),
                node_id: node.id.clone(),
                kind,
                presented,
                prompt_tokens,
                response: Some(raw),
                result,
                moved_to,
                timestamp: self.clock.now_millis(),
            });
            if let Some(answer) = committed {
                return Ok(Outcome::Answered { answer });
            }
            if valid {
                state.invalid_streak = 0;
            } else {
                state.invalid_streak += 1;
                tracing::debug!(node = %node.id, streak = state.invalid_streak, "invalid navigation output");
                if state.invalid_streak >= self.config.max_invalid_streak {
                    return Ok(Outcome::NoAnswer {
                        reason: NoAnswerReason::InvalidStreak,
                    });
                }
            }
        }
    }

    fn pop(&self, state: &mut NavigationState) {
        if let Some(left) = state.path.pop() {
            state.working_memory.remove(&left);
        }
    }
}

pub fn navigate(
    tree: &MemoryTree,
    query: &str,
    options: Option<&[String]>,
    client: &LlmClient,
    config: &Config,
) -> std::result::Result<NavigationResult, NavigateError> {
    let navigator = Navigator::new(tree, client, config).map_err(|source| NavigateError {
        source,
        trajectory: Vec::new(),
    })?;
    navigator.navigate(query, options)
}
