use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completion exchange, written as a line of JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tag: String,
    pub prompt: String,
    pub response: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    /// Unix milliseconds.
    pub timestamp: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Append-only log of completions, kept in memory and optionally mirrored
/// to a line-delimited file.
#[derive(Debug, Default)]
pub struct TraceLog {
    records: Mutex<Vec<TraceRecord>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl TraceLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TraceLog {
            records: Mutex::new(Vec::new()),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn record(&self, record: TraceRecord) {
        if let Some(sink) = &self.sink {
            let mut sink = sink.lock().unwrap_or_else(|p| p.into_inner());
            let line = serde_json::to_string(&record).expect("trace record serializes");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::warn!("failed to write trace record: {e}");
            }
        }
        self.records
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(record);
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.records
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> Result<Vec<TraceRecord>> {
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
}
