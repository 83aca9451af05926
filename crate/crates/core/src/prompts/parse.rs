use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    NonLeaf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub reasoning: Option<String>,
    pub action: Action,
    /// Present exactly when the action is a commit; mirrors the commit text.
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    NoActionLine,
    NoActionValue,
    OutOfRange { code: i64, node_kind: NodeKind, num_children: usize },
    MissingAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ParseError {
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::NoActionLine => f.write_str("response has no Action line"),
            ParseErrorKind::NoActionValue => f.write_str("Action line carries no integer"),
            ParseErrorKind::OutOfRange {
                code,
                node_kind: NodeKind::Leaf,
                ..
            } => write!(f, "action {code} is not allowed at a leaf (only -1 or -2)"),
            ParseErrorKind::OutOfRange {
                code, num_children, ..
            } => write!(
                f,
                "action {code} is not allowed at a node with {num_children} children"
            ),
            ParseErrorKind::MissingAnswer => f.write_str("commit without an Answer line"),
        }
    }
}

impl From<ParseErrorKind> for ParseError {
    fn from(kind: ParseErrorKind) -> Self {
        ParseError { kind }
    }
}

const ACTION: &str = "action:";
const REASONING: &str = "reasoning:";
const ANSWER: &str = "answer:";

/// Byte offset just past a leading `key` on this line, ignoring case,
/// indentation and markdown emphasis.
fn field_value_start(line: &str, key: &str) -> Option<usize> {
    let trimmed = line.trim_start_matches(|c: char| c.is_whitespace() || c == '*');
    let skip = line.len() - trimmed.len();
    let head = trimmed.get(..key.len())?;
    if head.eq_ignore_ascii_case(key) {
        let mut at = skip + key.len();
        at += line[at..].len() - line[at..].trim_start_matches('*').len();
        Some(at)
    } else {
        None
    }
}

fn is_delimiter(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 3 && t.bytes().all(|b| b == b'#')
}

fn first_integer(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let negative = bytes[i] == b'-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit);
        if bytes[i].is_ascii_digit() || negative {
            let start = i;
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            return text[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

fn clean_block(lines: &[&str]) -> Option<String> {
    let kept: Vec<&str> = lines.iter().copied().filter(|l| !is_delimiter(l)).collect();
    let text = kept.join("\n").trim().to_string();
    (!text.is_empty()).then_some(text)
}

/// Decode a navigation response. The last `Action:` line decides; reasoning
/// runs from the last `Reasoning:` line before it; a commit takes the text
/// after the last `Answer:` line up to the next delimiter or field line.
pub fn parse_response(
    raw: &str,
    node_kind: NodeKind,
    num_children: usize,
) -> Result<ParsedResponse, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let action_line = lines
        .iter()
        .rposition(|l| field_value_start(l, ACTION).is_some())
        .ok_or(ParseErrorKind::NoActionLine)?;
    let value_at = field_value_start(lines[action_line], ACTION).expect("matched above");
    let code = first_integer(&lines[action_line][value_at..]).ok_or(ParseErrorKind::NoActionValue)?;

    let reasoning = lines[..action_line]
        .iter()
        .rposition(|l| field_value_start(l, REASONING).is_some())
        .and_then(|r| {
            let first = &lines[r][field_value_start(lines[r], REASONING).expect("matched")..];
            let mut block = vec![first];
            block.extend_from_slice(&lines[r + 1..action_line]);
            clean_block(&block)
        });

    let out_of_range = || ParseErrorKind::OutOfRange {
        code,
        node_kind,
        num_children,
    };
    let action = match (node_kind, code) {
        (_, Action::REVERT_CODE) => Action::Revert,
        (NodeKind::Leaf, Action::COMMIT_CODE) => {
            let answer = extract_answer(&lines).ok_or(ParseErrorKind::MissingAnswer)?;
            Action::Commit(answer)
        }
        (NodeKind::NonLeaf, k) if k >= 0 && (k as u64) < num_children as u64 => {
            Action::Descend(k as usize)
        }
        _ => return Err(out_of_range().into()),
    };
    let answer = match &action {
        Action::Commit(a) => Some(a.clone()),
        _ => None,
    };
    Ok(ParsedResponse {
        reasoning,
        action,
        answer,
    })
}

/// Text after the last `Answer:` line, stopping at a delimiter or another
/// field line. Used by the baselines as well, which only need the answer.
pub(crate) fn extract_answer(lines: &[&str]) -> Option<String> {
    let at = lines
        .iter()
        .rposition(|l| field_value_start(l, ANSWER).is_some())?;
    let first = &lines[at][field_value_start(lines[at], ANSWER).expect("matched")..];
    let mut block = vec![first];
    for line in &lines[at + 1..] {
        if is_delimiter(line)
            || field_value_start(line, ACTION).is_some()
            || field_value_start(line, REASONING).is_some()
        {
            break;
        }
        block.push(line);
    }
    clean_block(&block)
}

pub fn parse_answer(raw: &str) -> Option<String> {
    let lines: Vec<&str> = raw.lines().collect();
    extract_answer(&lines)
}
