use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, TraceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the prompt must contain; `None` accepts any prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matcher: Option<String>,
    pub response: String,
}

impl ScriptEntry {
    pub fn any(response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: None,
            response: response.into(),
        }
    }

    pub fn expecting(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: Some(matcher.into()),
            response: response.into(),
        }
    }
}

/// Replays canned responses in order. A matcher that the prompt does not
/// satisfy is an error, never a skip.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        ScriptedBackend {
            script,
            cursor: Mutex::new(0),
        }
    }

    pub fn responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(responses.into_iter().map(ScriptEntry::any).collect())
    }

    /// Script that reproduces a recorded run: each prompt must match the
    /// recorded one exactly.
    pub fn from_trace(records: &[TraceRecord]) -> Self {
        Self::new(
            records
                .iter()
                .map(|r| ScriptEntry::expecting(r.prompt.clone(), r.response.clone()))
                .collect(),
        )
    }

    /// Load a script file: one JSON object per line, either a script entry
    /// (`{"matcher"?, "response"}`) or a trace record, which replays strictly.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut script = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let entry = if value.get("prompt").is_some() {
                let record: TraceRecord =
                    serde_json::from_value(value).map_err(|e| Error::MalformedRecord {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                ScriptEntry::expecting(record.prompt, record.response)
            } else {
                serde_json::from_value(value).map_err(|e| Error::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })?
            };
            script.push(entry);
        }
        Ok(Self::new(script))
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.consumed()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut cursor = match self.cursor.try_lock() {
            Ok(guard) => guard,
            Err(std::sync::TryLockError::WouldBlock) => return Err(BackendError::ConcurrentUse),
            Err(std::sync::TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let index = *cursor;
        let entry = self
            .script
            .get(index)
            .ok_or(BackendError::ScriptExhausted { consumed: index })?;
        if let Some(matcher) = &entry.matcher {
            if !request.prompt.contains(matcher.as_str()) {
                return Err(BackendError::ScriptMismatch {
                    index,
                    matcher: matcher.clone(),
                });
            }
        }
        *cursor += 1;
        Ok(entry.response.clone())
    }
}
