use serde::{Deserialize, Serialize};

use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub node_id: String,
    pub text: String,
    pub tokens: usize,
}

impl MemoryEntry {
    pub fn new(tokenizer: &dyn Tokenizer, node_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        MemoryEntry {
            node_id: node_id.into(),
            tokens: tokenizer.count(&text),
            text,
        }
    }
}

/// Summaries of the nodes on the current path, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingMemory {
    entries: Vec<MemoryEntry>,
}

impl WorkingMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append `entry`, then evict from the front until the total fits
    /// `budget`. Returns the evicted entries.
    pub fn push(&mut self, entry: MemoryEntry, budget: usize) -> Vec<MemoryEntry> {
        self.entries.push(entry);
        let mut evicted = Vec::new();
        while self.total_tokens() > budget {
            evicted.push(self.entries.remove(0));
        }
        evicted
    }

    /// Drop the entry contributed by `node_id`, if it is still held.
    pub fn remove(&mut self, node_id: &str) -> Option<MemoryEntry> {
        let at = self.entries.iter().rposition(|e| e.node_id == node_id)?;
        Some(self.entries.remove(at))
    }

    /// Entries other than the one contributed by `exclude`.
    pub fn entries_except(&self, exclude: &str) -> Vec<&MemoryEntry> {
        self.entries.iter().filter(|e| e.node_id != exclude).collect()
    }
}

/// Functional form of [`WorkingMemory::push`].
pub fn update_working_memory(memory: &[MemoryEntry], entry: MemoryEntry, budget: usize) -> Vec<MemoryEntry> {
    let mut m = WorkingMemory {
        entries: memory.to_vec(),
    };
    m.push(entry, budget);
    m.entries
}
