use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::option_label;
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Choice label ("A", "B", ...) for multiple choice, otherwise free text.
    pub gold: String,
    #[serde(default, skip_serializing)]
    pub context_tokens: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: Option<serde_json::Value>,
    context: Option<String>,
    query: Option<String>,
    options: Option<Vec<String>>,
    gold: Option<String>,
}

fn missing(line: usize, field: &str) -> Error {
    Error::MalformedRecord {
        line,
        message: format!("missing or empty field {field:?}"),
    }
}

/// Strips "(A)" or "A." style decoration from a label.
pub(crate) fn bare_label(label: &str) -> String {
    label
        .trim()
        .trim_start_matches('(')
        .trim_end_matches(['.', ')', ':'])
        .trim()
        .to_ascii_uppercase()
}

pub fn parse_dataset(text: &str, tokenizer: &dyn Tokenizer) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let nonempty = |v: Option<String>, field: &str| {
            v.filter(|s| !s.trim().is_empty()).ok_or_else(|| missing(line_no, field))
        };
        let id = match rec.id {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(missing(line_no, "id")),
        };
        let context = nonempty(rec.context, "context")?;
        let query = nonempty(rec.query, "query")?;
        let mut gold = nonempty(rec.gold, "gold")?;
        let options = rec.options.filter(|o| !o.is_empty());
        if let Some(opts) = &options {
            let label = bare_label(&gold);
            if !(0..opts.len()).any(|k| option_label(k) == label) {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    message: format!("gold {gold:?} is not one of the {} option labels", opts.len()),
                });
            }
            gold = label;
        }
        out.push(Example {
            context_tokens: tokenizer.count(&context),
            id,
            context,
            query,
            options,
            gold,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, tokenizer: &dyn Tokenizer) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, tokenizer)
}

/// The first "(X)" label in `predicted`, or a leading bare letter such as
/// "B" or "B." when there is none.
pub fn extract_choice(predicted: &str) -> Option<char> {
    let chars: Vec<char> = predicted.chars().collect();
    for w in chars.windows(3) {
        if w[0] == '(' && w[1].is_ascii_uppercase() && w[2] == ')' {
            return Some(w[1]);
        }
    }
    let t = predicted.trim();
    let mut it = t.chars();
    let first = it.next()?;
    let next = it.next();
    (first.is_ascii_uppercase() && matches!(next, None | Some('.' | ')' | ':'))).then_some(first)
}

/// Lowercase, punctuation to spaces, articles dropped, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn grade_answer(predicted: &str, example: &Example) -> bool {
    if example.options.is_some() {
        return extract_choice(predicted).is_some_and(|c| c.to_string() == example.gold);
    }
    let gold = normalize_answer(&example.gold);
    if gold.is_empty() {
        return false;
    }
    format!(" {} ", normalize_answer(predicted)).contains(&format!(" {gold} "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::default_tokenizer;

    fn parse(text: &str) -> Result<Vec<Example>> {
        parse_dataset(text, default_tokenizer().as_ref())
    }

    fn mc(gold: &str) -> Example {
        Example {
            id: "x".into(),
            context: "c".into(),
            query: "q".into(),
            options: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
            gold: gold.into(),
            context_tokens: 1,
        }
    }

    fn free(gold: &str) -> Example {
        Example {
            options: None,
            ..mc(gold)
        }
    }

    #[test]
    fn multiple_choice_record() {
        let ex = parse(r#"{"id":"q1","context":"long text here","query":"Why?","options":["a","b","c","d"],"gold":"A"}"#).unwrap();
        assert_eq!(ex[0].options.as_ref().unwrap().len(), 4);
        assert_eq!(ex[0].gold, "A");
        assert_eq!(ex[0].context_tokens, 3);
    }

    #[test]
    fn missing_query_names_the_line() {
        let text = "{\"id\":\"1\",\"context\":\"c\",\"query\":\"q\",\"gold\":\"g\"}\n{\"id\":\"2\",\"context\":\"c\",\"gold\":\"g\"}";
        match parse(text) {
            Err(Error::MalformedRecord { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("query"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_gold_and_bad_label() {
        assert!(matches!(
            parse(r#"{"id":"1","context":"c","query":"q"}"#),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(matches!(
            parse(r#"{"id":"1","context":"c","query":"q","options":["a","b"],"gold":"C"}"#),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(parse("not json").is_err());
    }

    #[test]
    fn free_form_record() {
        let ex = parse(r#"{"id":7,"context":"c","query":"Who?","gold":"Ryan"}"#).unwrap();
        assert_eq!(ex[0].options, None);
        assert_eq!(ex[0].id, "7");
    }

    #[test]
    fn gold_label_decoration_is_stripped() {
        let ex = parse(r#"{"id":"1","context":"c","query":"q","options":["a","b"],"gold":"(b)"}"#).unwrap();
        assert_eq!(ex[0].gold, "B");
    }

    #[test]
    fn grading() {
        assert!(grade_answer("(A)", &mc("A")));
        assert!(!grade_answer("The answer is (B).", &mc("A")));
        assert!(grade_answer("The answer is (B) because", &mc("B")));
        assert!(grade_answer("C. something", &mc("C")));
        assert!(grade_answer("D", &mc("D")));
        assert!(!grade_answer("no idea", &mc("A")));
        assert!(!grade_answer("A man did it", &mc("A")));
        assert!(grade_answer("Ryan", &free("Ryan")));
        assert!(grade_answer("It was Ryan, the temp.", &free("ryan")));
        assert!(grade_answer("the Dunder Mifflin office", &free("Dunder-Mifflin office")));
        assert!(!grade_answer("Bryan", &free("Ryan")));
        assert!(!grade_answer("anything", &free("the")));
    }
}
