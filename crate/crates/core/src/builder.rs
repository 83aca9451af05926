//! Memory-tree construction: segment the document, summarize each segment,
//! then repeatedly group and summarize a level until one root remains.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{Config, Grouping};
use crate::error::{Error, Result};
use crate::llm::{CompletionRequest, LlmClient};
use crate::model::{document_hash, node_id, MemoryTree, Segment, TreeNode};
use crate::prompts::{join_summaries, PromptSet};
use crate::tokenize::{split_into_segments, truncate, Side};

/// Recompressions tried before an over-budget summary is hard-truncated.
pub const MAX_RECOMPRESSIONS: usize = 3;

/// Sizes of the groups a level of `n` nodes is packed into.
pub fn group_sizes(n: usize, max_fanout: usize, grouping: Grouping) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let fanout = max_fanout.max(1);
    let groups = n.div_ceil(fanout);
    match grouping {
        Grouping::Greedy => {
            let mut sizes = vec![fanout; n / fanout];
            if !n.is_multiple_of(fanout) {
                sizes.push(n % fanout);
            }
            sizes
        }
        Grouping::Balanced => {
            let (base, extra) = (n / groups, n % groups);
            (0..groups).map(|g| base + usize::from(g < extra)).collect()
        }
    }
}

/// Greedy left-to-right packing: full groups of `max_fanout`, remainder last.
pub fn group_nodes<T: Clone>(nodes: &[T], max_fanout: usize) -> Vec<Vec<T>> {
    split_by_sizes(nodes, &group_sizes(nodes.len(), max_fanout, Grouping::Greedy))
}

fn split_by_sizes<T: Clone>(nodes: &[T], sizes: &[usize]) -> Vec<Vec<T>> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&s| {
            let group = nodes[at..at + s].to_vec();
            at += s;
            group
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub llm_calls: usize,
    pub passthrough_groups: usize,
    pub compressed_groups: usize,
    pub truncated_summaries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BuildCheckpoint {
    source_hash: String,
    construction_hash: String,
    segments: Vec<Segment>,
    levels: Vec<Vec<TreeNode>>,
}

pub struct TreeBuilder<'a> {
    client: &'a LlmClient,
    prompts: PromptSet,
    config: Config,
    checkpoint: Option<PathBuf>,
    llm_calls: AtomicUsize,
    passthrough_groups: AtomicUsize,
    compressed_groups: AtomicUsize,
    truncated: AtomicUsize,
}

impl<'a> TreeBuilder<'a> {
    pub fn new(client: &'a LlmClient, config: &Config) -> Result<Self> {
        config.validate(client.tokenizer())?;
        Ok(TreeBuilder {
            client,
            prompts: PromptSet::from_config(config)?,
            config: config.resolved(),
            checkpoint: None,
            llm_calls: AtomicUsize::new(0),
            passthrough_groups: AtomicUsize::new(0),
            compressed_groups: AtomicUsize::new(0),
            truncated: AtomicUsize::new(0),
        })
    }

    /// Flush completed levels to `path` and resume from it when it matches
    /// the document and construction settings.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    pub fn stats(&self) -> BuildStats {
        BuildStats {
            llm_calls: self.llm_calls.load(Ordering::Relaxed),
            passthrough_groups: self.passthrough_groups.load(Ordering::Relaxed),
            compressed_groups: self.compressed_groups.load(Ordering::Relaxed),
            truncated_summaries: self.truncated.load(Ordering::Relaxed),
        }
    }

    fn budget(&self) -> usize {
        self.config.summary_budget()
    }

    fn call(&self, prompt: String, tag: &str) -> Result<String> {
        self.llm_calls.fetch_add(1, Ordering::Relaxed);
        let request = CompletionRequest::new(prompt, self.config.sampling(), tag);
        Ok(self.client.complete(&request)?.trim().to_string())
    }

    /// Compression prompt over `summaries`, with the input cut (keep left)
    /// if the prompt would not leave room for generation.
    fn compress(&self, summaries: &[String], tag: &str) -> Result<String> {
        let tok = self.client.tokenizer();
        let mut prompt = self.prompts.render_construction_nonleaf(summaries)?;
        let limit = self.config.context_window - self.config.generation_reserve;
        if tok.count(&prompt) > limit {
            let overhead = tok.count(&self.prompts.render_construction_nonleaf(&[""])?);
            let mut room = limit.saturating_sub(overhead);
            let joined = join_summaries(summaries);
            loop {
                let cut = truncate(tok, &joined, room, Side::KeepLeft);
                prompt = self.prompts.render_construction_nonleaf(&[cut])?;
                if tok.count(&prompt) <= limit || room == 0 {
                    break;
                }
                room -= 1;
            }
        }
        self.call(prompt, tag)
    }

    fn enforce_budget(&self, mut text: String) -> Result<String> {
        let tok = self.client.tokenizer();
        for _ in 0..MAX_RECOMPRESSIONS {
            if tok.count(&text) <= self.budget() {
                return Ok(text);
            }
            text = self.compress(&[text], "recompress")?;
        }
        if tok.count(&text) <= self.budget() {
            return Ok(text);
        }
        self.truncated.fetch_add(1, Ordering::Relaxed);
        Ok(truncate(tok, &text, self.budget(), Side::KeepLeft))
    }

    /// Summary of one segment, within the summary budget.
    pub fn summarize_leaf(&self, segment: &Segment) -> Result<String> {
        let prompt = self.prompts.render_construction_leaf(&segment.text)?;
        let summary = self.call(prompt, "summarize-leaf")?;
        self.enforce_budget(summary)
    }

    /// Parent summary: the plain concatenation when it fits the budget,
    /// otherwise a compression of it.
    pub fn summarize_group(&self, child_summaries: &[String]) -> Result<String> {
        if child_summaries.is_empty() {
            return Err(Error::InvalidInput("cannot summarize an empty group".into()));
        }
        let joined = join_summaries(child_summaries);
        if self.client.tokenizer().count(&joined) <= self.budget() {
            self.passthrough_groups.fetch_add(1, Ordering::Relaxed);
            return Ok(joined);
        }
        self.compressed_groups.fetch_add(1, Ordering::Relaxed);
        let summary = self.compress(child_summaries, "summarize-group")?;
        self.enforce_budget(summary)
    }

    fn node(&self, level: usize, position: usize, summary: String) -> TreeNode {
        TreeNode {
            id: node_id(level, position),
            level,
            summary_token_count: self.client.tokenizer().count(&summary),
            summary,
            children: Vec::new(),
            segment_index: None,
        }
    }

    pub fn build(&self, document: &str) -> Result<MemoryTree> {
        if document.trim().is_empty() {
            return Err(Error::InvalidInput("document is empty".into()));
        }
        let source_hash = document_hash(document);
        let construction_hash = self.config.construction_hash();
        let mut state = self
            .load_checkpoint(&source_hash, &construction_hash)
            .unwrap_or_else(|| BuildCheckpoint {
                source_hash: source_hash.clone(),
                construction_hash: construction_hash.clone(),
                segments: Vec::new(),
                levels: Vec::new(),
            });
        if state.levels.is_empty() {
            state.segments = split_into_segments(
                self.client.tokenizer(),
                document,
                self.config.segment_size,
            )?;
            let summaries = self.parallel_map(&state.segments, |s| self.summarize_leaf(s))?;
            let leaves = summaries
                .into_iter()
                .enumerate()
                .map(|(i, summary)| TreeNode {
                    segment_index: Some(i),
                    ..self.node(1, i, summary)
                })
                .collect();
            state.levels.push(leaves);
            self.save_checkpoint(&state)?;
        }
        while state.levels.last().expect("at least the leaf level").len() > 1 {
            let below = state.levels.last().expect("non-empty");
            let level = below[0].level + 1;
            let sizes = group_sizes(below.len(), self.config.max_fanout, self.config.grouping);
            let groups = split_by_sizes(below, &sizes);
            let summaries = self.parallel_map(&groups, |g| {
                let kids: Vec<String> = g.iter().map(|n| n.summary.clone()).collect();
                self.summarize_group(&kids)
            })?;
            let parents = groups
                .iter()
                .zip(summaries)
                .enumerate()
                .map(|(j, (group, summary))| TreeNode {
                    children: group.iter().map(|n| n.id.clone()).collect(),
                    ..self.node(level, j, summary)
                })
                .collect();
            state.levels.push(parents);
            self.save_checkpoint(&state)?;
        }
        let root_id = state.levels.last().expect("non-empty")[0].id.clone();
        let nodes = state.levels.into_iter().flatten().collect();
        Ok(MemoryTree::from_parts(
            root_id,
            nodes,
            state.segments,
            source_hash,
            self.config.clone(),
        ))
    }

    fn parallel_map<T: Sync, F>(&self, items: &[T], f: F) -> Result<Vec<String>>
    where
        F: Fn(&T) -> Result<String> + Sync,
    {
        let workers = self.config.parallelism.min(items.len()).max(1);
        if workers == 1 {
            return items.iter().map(&f).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<String>>>> =
            Mutex::new((0..items.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = items.get(i) else { break };
                    let out = f(item);
                    let failed = out.is_err();
                    results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(out);
                    if failed {
                        next.store(items.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let results = results.into_inner().unwrap_or_else(|p| p.into_inner());
        let mut out = Vec::with_capacity(items.len());
        for r in results {
            match r {
                Some(Ok(s)) => out.push(s),
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        Ok(out)
    }

    fn load_checkpoint(&self, source_hash: &str, construction_hash: &str) -> Option<BuildCheckpoint> {
        let path = self.checkpoint.as_ref()?;
        let text = std::fs::read_to_string(path).ok()?;
        let cp: BuildCheckpoint = serde_json::from_str(&text).ok()?;
        (cp.source_hash == source_hash && cp.construction_hash == construction_hash).then(|| {
            tracing::info!(levels = cp.levels.len(), "resuming tree construction from {}", path.display());
            cp
        })
    }

    fn save_checkpoint(&self, state: &BuildCheckpoint) -> Result<()> {
        if let Some(path) = &self.checkpoint {
            let text = serde_json::to_string(state)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Build a tree with the configured prompts and no checkpointing.
pub fn build_tree(document: &str, config: &Config, client: &LlmClient) -> Result<MemoryTree> {
    TreeBuilder::new(client, config)?.build(document)
}

/// Default location of the partial-progress file next to a tree cache.
pub fn checkpoint_path(tree_path: &Path) -> PathBuf {
    let mut name = tree_path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Node count of a tree over `n` leaves: `n` plus every level of
/// repeated ceil-division by the fanout until one node remains.
pub fn expected_node_count(n: usize, max_fanout: usize) -> usize {
    let mut total = n;
    let mut level = n;
    while level > 1 {
        level = level.div_ceil(max_fanout);
        total += level;
    }
    total
}

/// Height (levels) of a tree over `n` leaves.
pub fn expected_height(n: usize, max_fanout: usize) -> usize {
    let mut height = 1;
    let mut level = n;
    while level > 1 {
        level = level.div_ceil(max_fanout);
        height += 1;
    }
    height
}
