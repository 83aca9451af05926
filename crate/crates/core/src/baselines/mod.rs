//! Comparison readers over the same backend: truncated full context,
//! query-scored segment retrieval, and a recurrent running summary.

mod scoring;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::llm::{CompletionRequest, LlmClient};
use crate::navigator::{NoAnswerReason, Outcome};
use crate::prompts::{parse_answer, PromptSet};
use crate::tokenize::{split_into_segments, truncate, Side};

pub use scoring::{cosine, score_segments, terms, EmbeddingScorer, SegmentScore, SegmentScorer, TfIdfScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "memwalker")]
    MemWalker,
    #[serde(rename = "full-left")]
    FullLeft,
    #[serde(rename = "full-right")]
    FullRight,
    #[serde(rename = "retrieval")]
    Retrieval,
    #[serde(rename = "recurrence")]
    Recurrence,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::MemWalker,
        Method::FullLeft,
        Method::FullRight,
        Method::Retrieval,
        Method::Recurrence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MemWalker => "memwalker",
            Method::FullLeft => "full-left",
            Method::FullRight => "full-right",
            Method::Retrieval => "retrieval",
            Method::Recurrence => "recurrence",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidInput(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub outcome: Outcome,
    /// Completions requested, regenerations included.
    pub calls: usize,
    /// Document tokens placed in the final answering prompt.
    pub context_tokens: usize,
    /// Retrieval only: chosen segments in prompt order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_segments: Vec<usize>,
    /// Recurrence only: the running summary after each step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summaries: Vec<String>,
}

struct Reader<'a> {
    client: &'a LlmClient,
    config: &'a Config,
    prompts: PromptSet,
    calls: usize,
}

impl<'a> Reader<'a> {
    fn new(client: &'a LlmClient, config: &'a Config) -> Result<Self> {
        config.validate(client.tokenizer())?;
        Ok(Reader {
            client,
            config,
            prompts: PromptSet::from_config(config)?,
            calls: 0,
        })
    }

    fn limit(&self) -> usize {
        self.config.context_window - self.config.generation_reserve
    }

    fn count(&self, text: &str) -> usize {
        self.client.tokenizer().count(text)
    }

    fn complete(&mut self, prompt: String, tag: &str) -> Result<String> {
        self.calls += 1;
        let request = CompletionRequest::new(prompt, self.config.sampling(), tag);
        Ok(self.client.complete(&request)?)
    }

    /// Tokens the QA prompt leaves for document text.
    fn context_room(&self, query: &str, options: Option<&[String]>, background: Option<&str>) -> Result<usize> {
        let empty = self
            .prompts
            .render_qa(query, options, "", background, self.config.reasoning_enabled)?;
        self.limit()
            .checked_sub(self.count(&empty))
            .ok_or_else(|| Error::InvalidInput("query and options do not fit the context window".into()))
    }

    /// QA prompt over `context`, cut on `side` until it fits.
    fn qa_prompt(
        &self,
        query: &str,
        options: Option<&[String]>,
        context: &str,
        background: Option<&str>,
        side: Side,
    ) -> Result<(String, usize)> {
        let mut context = context.to_string();
        loop {
            let prompt = self
                .prompts
                .render_qa(query, options, &context, background, self.config.reasoning_enabled)?;
            let count = self.count(&prompt);
            if count <= self.limit() {
                let tokens = self.count(&context);
                return Ok((prompt, tokens));
            }
            let n = self.count(&context);
            let excess = count - self.limit();
            if n == 0 {
                return Err(Error::InvalidInput("query and options do not fit the context window".into()));
            }
            context = truncate(self.client.tokenizer(), &context, n.saturating_sub(excess), side);
        }
    }

    /// Issue the QA prompt, regenerating while no answer can be read, up to
    /// the configured number of consecutive invalid outputs.
    fn answer(&mut self, prompt: String) -> Result<Outcome> {
        for _ in 0..self.config.max_invalid_streak {
            let raw = self.complete(prompt.clone(), "qa")?;
            if let Some(answer) = parse_answer(&raw) {
                return Ok(Outcome::Answered { answer });
            }
            tracing::debug!("baseline response has no Answer line; regenerating");
        }
        Ok(Outcome::NoAnswer {
            reason: NoAnswerReason::InvalidStreak,
        })
    }

    fn finish(self, outcome: Outcome, context_tokens: usize) -> BaselineResult {
        BaselineResult {
            outcome,
            calls: self.calls,
            context_tokens,
            selected_segments: Vec::new(),
            summaries: Vec::new(),
        }
    }
}

/// Whole document in one QA prompt, truncated on `side` to what fits.
pub fn full_context_answer(
    document: &str,
    query: &str,
    options: Option<&[String]>,
    side: Side,
    client: &LlmClient,
    config: &Config,
) -> Result<BaselineResult> {
    let mut reader = Reader::new(client, config)?;
    let room = reader.context_room(query, options, None)?;
    let context = truncate(client.tokenizer(), document.trim(), room, side);
    let (prompt, tokens) = reader.qa_prompt(query, options, &context, None, side)?;
    let outcome = reader.answer(prompt)?;
    Ok(reader.finish(outcome, tokens))
}

/// Indices of the ranking's longest prefix whose joined text fits `room`.
pub fn select_segments(
    ranked: &[SegmentScore],
    segment_text: impl Fn(usize) -> String,
    room: usize,
    tokenizer: &dyn crate::tokenize::Tokenizer,
) -> Vec<usize> {
    let mut chosen = Vec::new();
    let mut texts: Vec<String> = Vec::new();
    for s in ranked {
        texts.push(segment_text(s.segment_index));
        if tokenizer.count(&texts.join("\n")) > room {
            break;
        }
        chosen.push(s.segment_index);
    }
    chosen
}

/// Segments ranked against the query and packed best-first into the prompt.
pub fn retrieval_answer(
    document: &str,
    query: &str,
    options: Option<&[String]>,
    client: &LlmClient,
    config: &Config,
) -> Result<BaselineResult> {
    retrieval_answer_with(document, query, options, client, config, &TfIdfScorer)
}

pub fn retrieval_answer_with(
    document: &str,
    query: &str,
    options: Option<&[String]>,
    client: &LlmClient,
    config: &Config,
    scorer: &dyn SegmentScorer,
) -> Result<BaselineResult> {
    let mut reader = Reader::new(client, config)?;
    let tok = client.tokenizer();
    let segments = split_into_segments(tok, document, config.segment_size)?;
    let ranked = score_segments(query, &segments, scorer)?;
    let room = reader.context_room(query, options, None)?;
    let mut chosen = select_segments(&ranked, |i| segments[i].text.clone(), room, tok);
    if config.retrieval_document_order {
        chosen.sort_unstable();
    }
    let context = if chosen.is_empty() {
        // Not even the best segment fits: use as much of it as possible.
        let best = ranked[0].segment_index;
        chosen.push(best);
        truncate(tok, &segments[best].text, room, Side::KeepLeft)
    } else {
        chosen
            .iter()
            .map(|&i| segments[i].text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (prompt, tokens) = reader.qa_prompt(query, options, &context, None, Side::KeepLeft)?;
    let outcome = reader.answer(prompt)?;
    let mut result = reader.finish(outcome, tokens);
    result.selected_segments = chosen;
    Ok(result)
}

/// Read segments left to right, carrying a bounded query-aware summary,
/// then answer from the final summary and the last segment.
pub fn recurrence_answer(
    document: &str,
    query: &str,
    options: Option<&[String]>,
    client: &LlmClient,
    config: &Config,
) -> Result<BaselineResult> {
    let mut reader = Reader::new(client, config)?;
    let tok = client.tokenizer();
    let segments = split_into_segments(tok, document, config.recurrence_segment_size)?;
    let budget = config.recurrence_summary_budget;
    let mut summary: Option<String> = None;
    let mut summaries = Vec::new();
    let (last, rest) = segments.split_last().expect("at least one segment");
    for segment in rest {
        let mut text = segment.text.clone();
        let prompt = loop {
            let prompt = reader.prompts.render_recurrence(query, summary.as_deref(), &text)?;
            let count = tok.count(&prompt);
            if count <= reader.limit() {
                break prompt;
            }
            let n = tok.count(&text);
            let excess = count - reader.limit();
            if n <= excess {
                return Err(Error::InvalidInput("query does not fit the context window".into()));
            }
            text = truncate(tok, &text, n - excess, Side::KeepLeft);
        };
        let raw = reader.complete(prompt, "recurrence")?;
        let next = truncate(tok, raw.trim(), budget, Side::KeepLeft);
        summaries.push(next.clone());
        summary = Some(next);
    }
    let (prompt, tokens) = reader.qa_prompt(query, options, &last.text, summary.as_deref(), Side::KeepLeft)?;
    let outcome = reader.answer(prompt)?;
    let carried = summary.as_deref().map_or(0, |s| tok.count(s));
    let mut result = reader.finish(outcome, tokens + carried);
    result.summaries = summaries;
    Ok(result)
}

/// Run one of the non-tree methods.
pub fn baseline_answer(
    method: Method,
    document: &str,
    query: &str,
    options: Option<&[String]>,
    client: &LlmClient,
    config: &Config,
) -> Result<BaselineResult> {
    match method {
        Method::FullLeft => full_context_answer(document, query, options, Side::KeepLeft, client, config),
        Method::FullRight => full_context_answer(document, query, options, Side::KeepRight, client, config),
        Method::Retrieval => retrieval_answer(document, query, options, client, config),
        Method::Recurrence => recurrence_answer(document, query, options, client, config),
        Method::MemWalker => Err(Error::InvalidInput("memwalker is not a baseline".into())),
    }
}
