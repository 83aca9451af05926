//! Run configuration. Every field can be set from a flat TOML file; derived
//! budgets left unset are computed from the window, reserve and fanout.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompts::PromptSet;
use crate::tokenize::{self, Tokenizer};

/// Tokens set aside for the fixed instructions, the query and the options
/// when deriving summary and working-memory budgets.
pub const PROMPT_ALLOWANCE: usize = 384;

const QUALITY_TOML: &str = include_str!("../configs/quality.toml");
const SUMMSCREENFD_TOML: &str = include_str!("../configs/summscreenfd.toml");
const GOVREPORT_TOML: &str = include_str!("../configs/govreport.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Quality,
    SummScreenFd,
    GovReport,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Quality, Task::SummScreenFd, Task::GovReport];

    pub fn name(self) -> &'static str {
        match self {
            Task::Quality => "quality",
            Task::SummScreenFd => "summscreenfd",
            Task::GovReport => "govreport",
        }
    }

    fn shipped_toml(self) -> &'static str {
        match self {
            Task::Quality => QUALITY_TOML,
            Task::SummScreenFd => SUMMSCREENFD_TOML,
            Task::GovReport => GOVREPORT_TOML,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task {s:?}")))
    }
}

/// How a level's nodes are packed into parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Full groups of `max_fanout`, remainder last.
    #[default]
    Greedy,
    /// Same number of groups, sizes differing by at most one.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: Task,
    pub segment_size: usize,
    pub max_fanout: usize,
    pub context_window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary_budget: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub working_memory_budget: Option<usize>,
    pub generation_reserve: usize,
    pub max_invalid_streak: usize,
    /// Prompted-step cap; unset means three per tree node.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub reasoning_enabled: bool,
    pub faithful_prompts: bool,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub grouping: Grouping,
    pub tokenizer: String,
    pub recurrence_segment_size: usize,
    pub recurrence_summary_budget: usize,
    pub retrieval_document_order: bool,
    /// Examples longer than this many tokens fall in the "long" bucket.
    pub long_threshold: usize,
    pub parallelism: usize,
    pub model: String,
    pub system_prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            task: Task::Quality,
            segment_size: 1000,
            max_fanout: 8,
            context_window: 4096,
            summary_budget: None,
            working_memory_budget: None,
            generation_reserve: 512,
            max_invalid_streak: 3,
            max_steps: None,
            reasoning_enabled: true,
            faithful_prompts: true,
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 512,
            seed: None,
            grouping: Grouping::Greedy,
            tokenizer: tokenize::DEFAULT_SCHEME.to_string(),
            recurrence_segment_size: 2500,
            recurrence_summary_budget: 500,
            retrieval_document_order: false,
            long_threshold: 8000,
            parallelism: 1,
            model: "stable-beluga-2".to_string(),
            system_prompt: "You are a helpful assistant.".to_string(),
            template_dir: None,
        }
    }
}

impl Config {
    /// The shipped configuration for one of the evaluation tasks.
    pub fn for_task(task: Task) -> Self {
        Self::from_toml_str(task.shipped_toml()).expect("shipped task config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Shipped config for the task (the `task` key of `text`, else `task`,
    /// else QuALITY) with the keys present in `text` laid over it.
    pub fn layered(task: Option<Task>, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text)?;
        let task = match (task, overlay.get("task")) {
            (Some(t), _) => t,
            (None, Some(v)) => v.clone().try_into()?,
            (None, None) => Task::Quality,
        };
        let mut base = toml::Table::try_from(Self::for_task(task)).expect("config serializes");
        base.extend(overlay);
        base.insert("task".into(), toml::Value::String(task.name().into()));
        Ok(base.try_into()?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn summary_budget(&self) -> usize {
        self.summary_budget.unwrap_or_else(|| {
            self.context_window
                .saturating_sub(self.generation_reserve + PROMPT_ALLOWANCE)
                / self.max_fanout.max(1)
        })
    }

    pub fn working_memory_budget(&self) -> usize {
        self.working_memory_budget.unwrap_or_else(|| {
            self.context_window
                .saturating_sub(self.generation_reserve + self.segment_size + PROMPT_ALLOWANCE)
        })
    }

    pub fn max_steps_for(&self, node_count: usize) -> usize {
        self.max_steps.unwrap_or(3 * node_count.max(1))
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        }
    }

    /// Copy with derived budgets filled in, as stored in tree caches.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.summary_budget = Some(self.summary_budget());
        out.working_memory_budget = Some(self.working_memory_budget());
        out
    }

    /// Same config at a different tree shape; derived budgets are recomputed
    /// unless they were pinned explicitly.
    pub fn with_shape(&self, segment_size: usize, max_fanout: usize) -> Self {
        let mut out = self.clone();
        out.segment_size = segment_size;
        out.max_fanout = max_fanout;
        out
    }

    /// Digest of the fields that determine tree construction.
    pub fn construction_hash(&self) -> String {
        let key = serde_json::json!({
            "segment_size": self.segment_size,
            "max_fanout": self.max_fanout,
            "summary_budget": self.summary_budget(),
            "grouping": self.grouping,
            "tokenizer": self.tokenizer,
            "context_window": self.context_window,
            "generation_reserve": self.generation_reserve,
            "faithful_prompts": self.faithful_prompts,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    pub fn validate(&self, tokenizer: &dyn Tokenizer) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.segment_size == 0 {
            return fail("segment_size must be at least 1".into());
        }
        if self.max_fanout < 2 {
            return fail(format!("max_fanout must be at least 2, got {}", self.max_fanout));
        }
        if self.max_invalid_streak == 0 {
            return fail("max_invalid_streak must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return fail(format!("temperature must be non-negative, got {}", self.temperature));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > self.generation_reserve {
            return fail(format!(
                "max_new_tokens ({}) must be between 1 and generation_reserve ({})",
                self.max_new_tokens, self.generation_reserve
            ));
        }
        if self.summary_budget() == 0 {
            return fail("summary budget resolves to zero".into());
        }
        if self.recurrence_segment_size == 0 || self.recurrence_summary_budget == 0 {
            return fail("recurrence sizes must be at least 1".into());
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1".into());
        }
        if self.tokenizer != tokenizer.scheme() {
            return fail(format!(
                "config records tokenizer {:?} but {:?} is in use",
                self.tokenizer,
                tokenizer.scheme()
            ));
        }
        let overhead = PromptSet::builtin(self.faithful_prompts).leaf_overhead(tokenizer);
        if self.segment_size + self.generation_reserve + overhead >= self.context_window {
            return fail(format!(
                "segment_size {} + generation_reserve {} + prompt overhead {} must stay below context_window {}",
                self.segment_size, self.generation_reserve, overhead, self.context_window
            ));
        }
        Ok(())
    }
}
