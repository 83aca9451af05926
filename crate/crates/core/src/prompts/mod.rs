//! Prompt templates and the parser for structured navigation responses.
//!
//! Templates live as text assets under `templates/` and are compiled in; a
//! directory holding files of the same names overrides them at runtime.
//! Rendering works in two passes: line-level edits (child rows, optional
//! option and reasoning lines) on the template, then a single substitution
//! pass so inserted text is never re-scanned for placeholders.

mod parse;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

pub use parse::{parse_answer, parse_response, NodeKind, ParseError, ParseErrorKind, ParsedResponse};

/// Rendered in place of an empty working memory.
pub const EMPTY_MEMORY: &str = "None.";

const CHILD_ROW_FIRST: &str = "[CHILD_SUMM_NODE_0]";
const CHILD_ROW_LAST: &str = "[CHILD_SUMM_NODE_N]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    ConstructionLeaf,
    ConstructionNonLeaf,
    Triage,
    Leaf,
    Qa,
    Recurrence,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::ConstructionLeaf,
        TemplateKind::ConstructionNonLeaf,
        TemplateKind::Triage,
        TemplateKind::Leaf,
        TemplateKind::Qa,
        TemplateKind::Recurrence,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::ConstructionLeaf => "construction_leaf.txt",
            TemplateKind::ConstructionNonLeaf => "construction_nonleaf.txt",
            TemplateKind::Triage => "triage.txt",
            TemplateKind::Leaf => "leaf.txt",
            TemplateKind::Qa => "qa.txt",
            TemplateKind::Recurrence => "recurrence.txt",
        }
    }

    pub fn builtin(self) -> &'static str {
        match self {
            TemplateKind::ConstructionLeaf => include_str!("../../templates/construction_leaf.txt"),
            TemplateKind::ConstructionNonLeaf => {
                include_str!("../../templates/construction_nonleaf.txt")
            }
            TemplateKind::Triage => include_str!("../../templates/triage.txt"),
            TemplateKind::Leaf => include_str!("../../templates/leaf.txt"),
            TemplateKind::Qa => include_str!("../../templates/qa.txt"),
            TemplateKind::Recurrence => include_str!("../../templates/recurrence.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: HashMap<TemplateKind, String>,
    faithful: bool,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin(true)
    }
}

impl PromptSet {
    /// The compiled-in templates. `faithful` keeps the original wording
    /// including its typos ("Relpy", "Your should reply").
    pub fn builtin(faithful: bool) -> Self {
        PromptSet {
            templates: TemplateKind::ALL
                .into_iter()
                .map(|k| (k, k.builtin().to_string()))
                .collect(),
            faithful,
        }
    }

    /// Built-in templates with any same-named files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path, faithful: bool) -> Result<Self> {
        let mut set = Self::builtin(faithful);
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(kind, text);
            }
        }
        Ok(set)
    }

    pub fn from_config(config: &crate::Config) -> Result<Self> {
        match &config.template_dir {
            Some(dir) => Self::with_overrides(dir, config.faithful_prompts),
            None => Ok(Self::builtin(config.faithful_prompts)),
        }
    }

    pub fn template(&self, kind: TemplateKind) -> &str {
        &self.templates[&kind]
    }

    pub fn is_faithful(&self) -> bool {
        self.faithful
    }

    fn lines(&self, kind: TemplateKind) -> Vec<String> {
        let text = self.template(kind);
        let text = if self.faithful {
            text.to_string()
        } else {
            text.replace("Relpy", "Reply")
                .replace("Your should reply", "You should reply")
        };
        text.split('\n').map(str::to_string).collect()
    }

    pub fn render_construction_leaf(&self, segment_text: &str) -> Result<String> {
        if segment_text.is_empty() {
            return Err(Error::InvalidInput("segment text is empty".into()));
        }
        render(
            self.lines(TemplateKind::ConstructionLeaf),
            &[("TEXT_OF_SEGMENT", segment_text)],
        )
    }

    pub fn render_construction_nonleaf<S: AsRef<str>>(&self, summaries: &[S]) -> Result<String> {
        if summaries.is_empty() {
            return Err(Error::InvalidInput("no summaries to compress".into()));
        }
        let joined = join_summaries(summaries);
        render(
            self.lines(TemplateKind::ConstructionNonLeaf),
            &[("SUMMARIES", &joined)],
        )
    }

    pub fn render_triage<S: AsRef<str>>(
        &self,
        query: &str,
        child_summaries: &[S],
        reasoning_enabled: bool,
    ) -> Result<String> {
        if child_summaries.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "triage needs at least two children, got {}",
                child_summaries.len()
            )));
        }
        self.render_triage_unchecked(query, child_summaries, reasoning_enabled)
    }

    fn render_triage_unchecked<S: AsRef<str>>(
        &self,
        query: &str,
        child_summaries: &[S],
        reasoning_enabled: bool,
    ) -> Result<String> {
        let mut lines = expand_child_rows(self.lines(TemplateKind::Triage), child_summaries.len())?;
        if !reasoning_enabled {
            drop_reasoning_lines(&mut lines);
        }
        let keys: Vec<String> = (0..child_summaries.len())
            .map(|i| format!("CHILD_SUMM_NODE_{i}"))
            .collect();
        let mut values: Vec<(&str, &str)> = vec![("QUERY", query)];
        values.extend(
            keys.iter()
                .map(String::as_str)
                .zip(child_summaries.iter().map(AsRef::as_ref)),
        );
        render(lines, &values)
    }

    pub fn render_leaf(
        &self,
        query: &str,
        options: Option<&[String]>,
        segment_text: &str,
        working_memory: Option<&str>,
        reasoning_enabled: bool,
    ) -> Result<String> {
        if segment_text.is_empty() {
            return Err(Error::InvalidInput("segment text is empty".into()));
        }
        self.render_reading(
            TemplateKind::Leaf,
            query,
            options,
            segment_text,
            Some(memory_or_placeholder(working_memory)),
            reasoning_enabled,
        )
    }

    /// Single-shot question answering over `context`, used by the baselines.
    /// The background line is dropped when `background` is `None`.
    pub fn render_qa(
        &self,
        query: &str,
        options: Option<&[String]>,
        context: &str,
        background: Option<&str>,
        reasoning_enabled: bool,
    ) -> Result<String> {
        self.render_reading(
            TemplateKind::Qa,
            query,
            options,
            context,
            background.map(|b| memory_or_placeholder(Some(b))),
            reasoning_enabled,
        )
    }

    pub fn render_recurrence(
        &self,
        query: &str,
        previous_summary: Option<&str>,
        segment_text: &str,
    ) -> Result<String> {
        render(
            self.lines(TemplateKind::Recurrence),
            &[
                ("WORKING_MEMORY", memory_or_placeholder(previous_summary)),
                ("TEXT_OF_SEGMENT", segment_text),
                ("QUERY", query),
            ],
        )
    }

    fn render_reading(
        &self,
        kind: TemplateKind,
        query: &str,
        options: Option<&[String]>,
        text: &str,
        memory: Option<&str>,
        reasoning_enabled: bool,
    ) -> Result<String> {
        let mut lines = self.lines(kind);
        let options_block = options.map(format_options);
        if options_block.is_none() {
            lines.retain(|l| l.trim() != "[OPTIONS]");
        } else {
            for line in lines.iter_mut() {
                if line.trim_end() == "Answer: ..." {
                    *line = "Answer: (A) ...".to_string();
                }
            }
        }
        if memory.is_none() {
            lines.retain(|l| !l.contains("[WORKING_MEMORY]"));
        }
        if !reasoning_enabled {
            drop_reasoning_lines(&mut lines);
        }
        let mut values = vec![("TEXT_OF_SEGMENT", text), ("QUERY", query)];
        if let Some(block) = &options_block {
            values.push(("OPTIONS", block));
        }
        if let Some(m) = memory {
            values.push(("WORKING_MEMORY", m));
        }
        render(lines, &values)
    }

    /// Tokens of the leaf prompt with every dynamic field empty.
    pub fn leaf_overhead(&self, tokenizer: &dyn Tokenizer) -> usize {
        let prompt = self
            .render_reading(TemplateKind::Leaf, "", None, "", Some(""), true)
            .expect("leaf template renders");
        tokenizer.count(&prompt)
    }

    /// Tokens of the triage prompt with `n` empty children and an empty query.
    pub fn triage_overhead(&self, tokenizer: &dyn Tokenizer, n: usize, reasoning: bool) -> usize {
        let empty = vec![""; n];
        let prompt = self
            .render_triage_unchecked("", &empty, reasoning)
            .expect("triage template renders");
        tokenizer.count(&prompt)
    }
}

/// Multiple-choice options as "(A) text" lines.
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {o}", option_label(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// "A", "B", ... for option `index`.
pub fn option_label(index: usize) -> String {
    let mut n = index;
    let mut label = Vec::new();
    loop {
        label.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}

/// Concatenation used both for passthrough parent summaries and for the
/// compression prompt.
pub fn join_summaries<S: AsRef<str>>(summaries: &[S]) -> String {
    summaries
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join("\n")
}

fn memory_or_placeholder(memory: Option<&str>) -> &str {
    match memory {
        Some(m) if !m.trim().is_empty() => m,
        _ => EMPTY_MEMORY,
    }
}

fn drop_reasoning_lines(lines: &mut Vec<String>) {
    lines.retain(|l| {
        let t = l.trim();
        !(t.starts_with("First provide reasoning") || t == "Reasoning: ...")
    });
}

/// Replace the "Summary 0 .. Summary N" block with exactly `n` rows.
fn expand_child_rows(lines: Vec<String>, n: usize) -> Result<Vec<String>> {
    let first = lines
        .iter()
        .position(|l| l.contains(CHILD_ROW_FIRST))
        .ok_or_else(|| Error::Template(format!("triage template lacks {CHILD_ROW_FIRST}")))?;
    let last = lines
        .iter()
        .position(|l| l.contains(CHILD_ROW_LAST))
        .filter(|&i| i >= first)
        .ok_or_else(|| Error::Template(format!("triage template lacks {CHILD_ROW_LAST}")))?;
    let pattern = &lines[first];
    let at = pattern.find(CHILD_ROW_FIRST).expect("found above");
    let (prefix, suffix) = (&pattern[..at], &pattern[at + CHILD_ROW_FIRST.len()..]);
    let digit = prefix.rfind('0');
    let rows = (0..n).map(|i| {
        let label = match digit {
            Some(d) => format!("{}{i}{}", &prefix[..d], &prefix[d + 1..]),
            None => prefix.to_string(),
        };
        format!("{label}[CHILD_SUMM_NODE_{i}]{suffix}")
    });
    let mut out = lines[..first].to_vec();
    out.extend(rows);
    out.extend_from_slice(&lines[last + 1..]);
    Ok(out)
}

fn is_placeholder_name(name: &str) -> bool {
    name.len() >= 2
        && name.as_bytes()[0].is_ascii_uppercase()
        && name
            .bytes()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
}

/// Single pass over the template: every `[NAME]` placeholder is replaced by
/// its value; a placeholder without a value is an error.
fn render(lines: Vec<String>, values: &[(&str, &str)]) -> Result<String> {
    let template = lines.join("\n");
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template.as_str();
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find(']') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let name = &after[..close];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Template(format!("unresolved placeholder [{name}]")))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('[');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> PromptSet {
        PromptSet::default()
    }

    #[test]
    fn construction_leaf() {
        let p = set().render_construction_leaf("Once upon a time").unwrap();
        assert_eq!(
            p,
            "Once upon a time. Summarize the above text comprehensively into a fluent passage."
        );
        assert!(set().render_construction_leaf("").is_err());
        let odd = "text with [QUERY] inside";
        assert_eq!(set().render_construction_leaf(odd).unwrap().matches(odd).count(), 1);
    }

    #[test]
    fn construction_nonleaf() {
        let p = set().render_construction_nonleaf(&["A.", "B."]).unwrap();
        assert_eq!(p, "A.\nB.. Compress each summary into a much shorter summary.");
        assert!(set().render_construction_nonleaf(&["only"]).is_ok());
        assert!(set().render_construction_nonleaf::<&str>(&[]).is_err());
    }

    #[test]
    fn triage_lists_children() {
        let p = set()
            .render_triage("Why?", &["The story is set on Mars", "Ro climbs"], true)
            .unwrap();
        assert!(p.contains("To answer the question: Why?\n"));
        assert!(p.contains("Summary 0: The story is set on Mars\nSummary 1: Ro climbs\n\nRelpy"));
        assert!(!p.contains("Summary 2"));
        assert!(p.contains("Reasoning: ...\nAction: 0 / 1 / 2, ..."));
        assert!(set().render_triage("q", &["one"], true).is_err());
    }

    #[test]
    fn triage_without_reasoning() {
        let p = set().render_triage("q", &["a", "b", "c"], false).unwrap();
        assert!(!p.contains("Reasoning"));
        assert!(!p.contains("First provide reasoning"));
        assert!(p.contains("Summary 2: c"));
    }

    #[test]
    fn corrected_wording() {
        let p = PromptSet::builtin(false).render_triage("q", &["a", "b"], true).unwrap();
        assert!(p.contains("Reply with the passage number"));
        assert!(!p.contains("Relpy"));
        let l = PromptSet::builtin(false)
            .render_leaf("q", None, "t", None, true)
            .unwrap();
        assert!(l.contains("You should reply"));
    }

    #[test]
    fn leaf_with_memory_and_options() {
        let opts = vec!["first".to_string(), "second".to_string()];
        let p = set()
            .render_leaf("Why?", Some(&opts), "seg text", Some("Ro, a young Martian"), true)
            .unwrap();
        assert!(p.contains("Story background information: Ro, a young Martian\nMain text: seg text\n\nWhy?\n(A) first\n(B) second\n\n"));
        assert!(p.contains("Answer: (A) ...\n"));
    }

    #[test]
    fn leaf_free_form_and_empty_memory() {
        let p = set().render_leaf("Who?", None, "seg", None, true).unwrap();
        assert!(p.contains("Story background information: None.\n"));
        assert!(p.contains("Who?\n\nIf the answer CANNOT"));
        assert!(p.contains("\nAnswer: ...\n"));
        assert!(!p.contains("[OPTIONS]"));
        assert!(set().render_leaf("Who?", None, "", None, true).is_err());
        let blank = set().render_leaf("Who?", None, "seg", Some("  "), true).unwrap();
        assert_eq!(blank, p);
    }

    #[test]
    fn qa_without_background() {
        let p = set().render_qa("Q", None, "ctx", None, true).unwrap();
        assert!(!p.contains("Story background"));
        assert!(p.starts_with("Read the text in triple quotes and answer a question:\nMain text: ctx\n"));
    }

    #[test]
    fn unresolved_placeholder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("construction_leaf.txt"), "[TEXT_OF_SEGMENT] [EXTRA_FIELD]")
            .unwrap();
        let s = PromptSet::with_overrides(dir.path(), true).unwrap();
        assert!(matches!(s.render_construction_leaf("x"), Err(Error::Template(_))));
        // Untouched kinds keep the built-in text.
        assert_eq!(s.template(TemplateKind::Triage), TemplateKind::Triage.builtin());
    }

    #[test]
    fn option_labels() {
        assert_eq!(option_label(0), "A");
        assert_eq!(option_label(3), "D");
        assert_eq!(option_label(25), "Z");
        assert_eq!(option_label(26), "AA");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn triage_render_is_injective(
                q1 in "[a-z ]{1,20}", q2 in "[a-z ]{1,20}",
                kids1 in proptest::collection::vec("[a-z ]{0,15}", 2..6),
                kids2 in proptest::collection::vec("[a-z ]{0,15}", 2..6),
            ) {
                let s = PromptSet::default();
                let a = s.render_triage(&q1, &kids1, true).unwrap();
                let b = s.render_triage(&q2, &kids2, true).unwrap();
                prop_assert_eq!(a == b, q1 == q2 && kids1 == kids2);
            }

            #[test]
            fn leaf_render_is_injective(
                q1 in "[a-z]{1,8}", q2 in "[a-z]{1,8}",
                t1 in "[a-z ]{1,20}", t2 in "[a-z ]{1,20}",
                m1 in proptest::option::of("[a-z]{1,10}"), m2 in proptest::option::of("[a-z]{1,10}"),
            ) {
                let s = PromptSet::default();
                let a = s.render_leaf(&q1, None, &t1, m1.as_deref(), true).unwrap();
                let b = s.render_leaf(&q2, None, &t2, m2.as_deref(), true).unwrap();
                prop_assert_eq!(a == b, q1 == q2 && t1 == t2 && m1 == m2);
            }
        }
    }
}
