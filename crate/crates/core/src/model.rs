//! Shared domain types: segments, summary nodes, the memory tree and
//! navigation actions, plus structural validation of trees.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    /// Half-open range of Unicode scalar offsets into the source document.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub level: usize,
    pub summary: String,
    pub children: Vec<String>,
    pub segment_index: Option<usize>,
    pub summary_token_count: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.segment_index.is_some()
    }
}

/// Deterministic id for the node at `position` (0-based, left to right) on `level`.
pub fn node_id(level: usize, position: usize) -> String {
    format!("L{level}-{position}")
}

/// Hex SHA-256 of the document bytes.
pub fn document_hash(document: &str) -> String {
    hex::encode(Sha256::digest(document.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeFile {
    source_hash: String,
    config_snapshot: Config,
    segments: Vec<Segment>,
    nodes: Vec<TreeNode>,
    root_id: String,
}

/// Immutable summary tree over one document. Nodes are stored level by level,
/// left to right, so serialization is stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TreeFile", into = "TreeFile")]
pub struct MemoryTree {
    pub source_hash: String,
    pub config_snapshot: Config,
    pub segments: Vec<Segment>,
    nodes: Vec<TreeNode>,
    pub root_id: String,
    index: HashMap<String, usize>,
}

impl From<TreeFile> for MemoryTree {
    fn from(f: TreeFile) -> Self {
        MemoryTree::from_parts(f.root_id, f.nodes, f.segments, f.source_hash, f.config_snapshot)
    }
}

impl From<MemoryTree> for TreeFile {
    fn from(t: MemoryTree) -> Self {
        TreeFile {
            source_hash: t.source_hash,
            config_snapshot: t.config_snapshot,
            segments: t.segments,
            nodes: t.nodes,
            root_id: t.root_id,
        }
    }
}

impl PartialEq for MemoryTree {
    fn eq(&self, other: &Self) -> bool {
        self.source_hash == other.source_hash
            && self.config_snapshot == other.config_snapshot
            && self.segments == other.segments
            && self.nodes == other.nodes
            && self.root_id == other.root_id
    }
}

impl MemoryTree {
    /// Assemble a tree without checking it; run [`MemoryTree::validate`] on
    /// anything that did not come from the builder.
    pub fn from_parts(
        root_id: String,
        nodes: Vec<TreeNode>,
        segments: Vec<Segment>,
        source_hash: String,
        config_snapshot: Config,
    ) -> Self {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            index.entry(node.id.clone()).or_insert(i);
        }
        MemoryTree {
            source_hash,
            config_snapshot,
            segments,
            nodes,
            root_id,
            index,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn root(&self) -> Option<&TreeNode> {
        self.node(&self.root_id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Levels from root to leaves; a single-leaf tree has height 1.
    pub fn height(&self) -> usize {
        self.root().map_or(0, |r| r.level)
    }

    pub fn segment(&self, index: usize) -> Option<&Segment> {
        self.segments.get(index)
    }

    /// Token count of the original document, as the sum over its segments.
    pub fn document_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_count).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Load a cached tree and check it was built from `document`.
    pub fn load_for_document(path: &Path, document: &str) -> Result<Self> {
        let tree = Self::load(path)?;
        let expected = document_hash(document);
        if tree.source_hash != expected {
            return Err(Error::StaleCache {
                path: path.to_path_buf(),
                expected,
                found: tree.source_hash,
            });
        }
        Ok(tree)
    }

    /// Leaf ids in left-to-right (in-order) traversal from the root.
    pub fn leaves_in_order(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut stack: Vec<&str> = vec![&self.root_id];
        let mut seen = HashSet::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let Some(node) = self.node(id) else { continue };
            if node.children.is_empty() {
                out.push(node);
            }
            stack.extend(node.children.iter().rev().map(String::as_str));
        }
        out
    }

    pub fn validate(&self, tokenizer: &dyn Tokenizer) -> Vec<Violation> {
        validate_tree(self, tokenizer)
    }
}

/// A navigation decision, numerically encoded as the child index for
/// `Descend`, -1 for `Revert` and -2 for `Commit`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Descend(usize),
    Revert,
    Commit(String),
}

impl Action {
    pub const REVERT_CODE: i64 = -1;
    pub const COMMIT_CODE: i64 = -2;

    pub fn code(&self) -> i64 {
        match self {
            Action::Descend(k) => *k as i64,
            Action::Revert => Self::REVERT_CODE,
            Action::Commit(_) => Self::COMMIT_CODE,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Descend(k) => write!(f, "descend {k}"),
            Action::Revert => f.write_str("revert"),
            Action::Commit(answer) => write!(f, "commit {answer:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingRoot,
    DuplicateId,
    DanglingChild,
    MultipleParents,
    RootHasParent,
    Unreachable,
    Cycle,
    LeafShape,
    Fanout,
    Level,
    SummaryBudget,
    SummaryTokenCount,
    LeafOrder,
    Segment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node_id: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node_id {
            Some(id) => write!(f, "{:?} at {id}: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

/// Report every structural invariant the tree breaks. An empty list means
/// the tree is well formed.
pub fn validate_tree(tree: &MemoryTree, tokenizer: &dyn Tokenizer) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |node: Option<&str>, kind, message: String| {
        out.push(Violation {
            node_id: node.map(str::to_string),
            kind,
            message,
        })
    };
    let cfg = &tree.config_snapshot;
    let max_fanout = cfg.max_fanout;
    let summary_budget = cfg.summary_budget();

    let mut ids = HashSet::new();
    for node in &tree.nodes {
        if !ids.insert(node.id.as_str()) {
            push(Some(&node.id), ViolationKind::DuplicateId, "id appears more than once".into());
        }
    }

    let mut parents: HashMap<&str, Vec<&str>> = HashMap::new();
    for node in &tree.nodes {
        for child in &node.children {
            if tree.node(child).is_none() {
                push(
                    Some(&node.id),
                    ViolationKind::DanglingChild,
                    format!("child {child} does not exist"),
                );
            }
            parents.entry(child.as_str()).or_default().push(&node.id);
        }
    }
    for (child, ps) in &parents {
        if ps.len() > 1 {
            push(
                Some(child),
                ViolationKind::MultipleParents,
                format!("has {} parents: {}", ps.len(), ps.join(", ")),
            );
        }
    }

    if tree.root().is_none() {
        push(
            Some(&tree.root_id),
            ViolationKind::MissingRoot,
            "root id does not name a node".into(),
        );
    } else if let Some(ps) = parents.get(tree.root_id.as_str()) {
        push(
            Some(&tree.root_id),
            ViolationKind::RootHasParent,
            format!("root is a child of {}", ps.join(", ")),
        );
    }

    // Reachability and cycle detection by iterative DFS with colouring.
    let mut state: HashMap<&str, u8> = HashMap::new();
    if tree.root().is_some() {
        let mut stack: Vec<(&str, usize)> = vec![(&tree.root_id, 0)];
        state.insert(&tree.root_id, 1);
        while let Some((id, next)) = stack.pop() {
            let node = tree.node(id).expect("only existing nodes are pushed");
            if let Some(child) = node.children.get(next) {
                stack.push((id, next + 1));
                if tree.node(child).is_none() {
                    continue;
                }
                match state.get(child.as_str()) {
                    Some(1) => push(
                        Some(child),
                        ViolationKind::Cycle,
                        format!("reached again from descendant {id}"),
                    ),
                    Some(_) => {}
                    None => {
                        state.insert(child, 1);
                        stack.push((child, 0));
                    }
                }
            } else {
                state.insert(id, 2);
            }
        }
    }
    for node in &tree.nodes {
        if !state.contains_key(node.id.as_str()) {
            push(Some(&node.id), ViolationKind::Unreachable, "not reachable from root".into());
        }
    }

    for node in &tree.nodes {
        let id = Some(node.id.as_str());
        let leaf_by_segment = node.segment_index.is_some();
        let leaf_by_children = node.children.is_empty();
        if leaf_by_segment != leaf_by_children {
            push(
                id,
                ViolationKind::LeafShape,
                "segment_index must be present exactly when children are empty".into(),
            );
        }
        if !leaf_by_children && node.children.len() > max_fanout {
            push(
                id,
                ViolationKind::Fanout,
                format!("{} children exceeds max_fanout {max_fanout}", node.children.len()),
            );
        }
        if leaf_by_children {
            if node.level != 1 {
                push(id, ViolationKind::Level, format!("leaf at level {}", node.level));
            }
        } else {
            let child_max = node
                .children
                .iter()
                .filter_map(|c| tree.node(c))
                .map(|c| c.level)
                .max()
                .unwrap_or(0);
            if node.level != child_max + 1 {
                push(
                    id,
                    ViolationKind::Level,
                    format!("level {} but deepest child is level {child_max}", node.level),
                );
            }
        }
        if node.summary_token_count > summary_budget {
            push(
                id,
                ViolationKind::SummaryBudget,
                format!(
                    "summary has {} tokens, budget {summary_budget}",
                    node.summary_token_count
                ),
            );
        }
        let counted = tokenizer.count(&node.summary);
        if counted != node.summary_token_count {
            push(
                id,
                ViolationKind::SummaryTokenCount,
                format!("stored {} tokens, counted {counted}", node.summary_token_count),
            );
        }
        if let Some(si) = node.segment_index {
            if si >= tree.segments.len() {
                push(id, ViolationKind::Segment, format!("segment {si} does not exist"));
            }
        }
    }

    let order: Vec<Option<usize>> = tree
        .leaves_in_order()
        .iter()
        .map(|n| n.segment_index)
        .collect();
    let expected: Vec<Option<usize>> = (0..tree.segments.len()).map(Some).collect();
    if order != expected {
        let shown: Vec<String> = order
            .iter()
            .map(|o| o.map_or("-".to_string(), |i| i.to_string()))
            .collect();
        push(
            None,
            ViolationKind::LeafOrder,
            format!(
                "leaves read {} instead of 0..{}",
                shown.join(","),
                tree.segments.len()
            ),
        );
    }

    let mut at = 0;
    for (i, seg) in tree.segments.iter().enumerate() {
        let mut problems = Vec::new();
        if seg.index != i {
            problems.push(format!("index {} at position {i}", seg.index));
        }
        if seg.char_span.0 != at || seg.char_span.1 < seg.char_span.0 {
            problems.push(format!("span {:?} does not continue at {at}", seg.char_span));
        }
        if seg.char_span.1.saturating_sub(seg.char_span.0) != seg.text.chars().count() {
            problems.push("span length differs from text length".into());
        }
        let counted = tokenizer.count(&seg.text);
        if counted != seg.token_count {
            problems.push(format!("stored {} tokens, counted {counted}", seg.token_count));
        }
        if seg.token_count > cfg.segment_size {
            problems.push(format!(
                "{} tokens exceeds segment_size {}",
                seg.token_count, cfg.segment_size
            ));
        }
        at = seg.char_span.1;
        for p in problems {
            push(None, ViolationKind::Segment, format!("segment {i}: {p}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::WordPieceTokenizer;

    fn leaf(pos: usize, summary: &str) -> TreeNode {
        TreeNode {
            id: node_id(1, pos),
            level: 1,
            summary: summary.into(),
            children: vec![],
            segment_index: Some(pos),
            summary_token_count: WordPieceTokenizer.count(summary),
        }
    }

    fn parent(level: usize, pos: usize, children: &[&str]) -> TreeNode {
        TreeNode {
            id: node_id(level, pos),
            level,
            summary: "p".into(),
            children: children.iter().map(|c| c.to_string()).collect(),
            segment_index: None,
            summary_token_count: 1,
        }
    }

    fn segments(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| Segment {
                index: i,
                text: "ab ".into(),
                token_count: 1,
                char_span: (3 * i, 3 * i + 3),
            })
            .collect()
    }

    fn tree(root: &str, nodes: Vec<TreeNode>, n_segments: usize) -> MemoryTree {
        MemoryTree::from_parts(
            root.into(),
            nodes,
            segments(n_segments),
            "h".into(),
            Config::default(),
        )
    }

    fn kinds(t: &MemoryTree) -> Vec<ViolationKind> {
        t.validate(&WordPieceTokenizer).into_iter().map(|v| v.kind).collect()
    }

    #[test]
    fn well_formed_two_level_tree() {
        let t = tree(
            "L2-0",
            vec![leaf(0, "a"), leaf(1, "b"), leaf(2, "c"), parent(2, 0, &["L1-0", "L1-1", "L1-2"])],
            3,
        );
        assert_eq!(t.validate(&WordPieceTokenizer), vec![]);
        assert_eq!(t.height(), 2);
    }

    #[test]
    fn fanout_violation_names_node() {
        let mut nodes: Vec<_> = (0..9).map(|i| leaf(i, "x")).collect();
        let ids: Vec<String> = (0..9).map(|i| node_id(1, i)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        nodes.push(parent(2, 0, &refs));
        let t = tree("L2-0", nodes, 9);
        let v = t.validate(&WordPieceTokenizer);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Fanout);
        assert_eq!(v[0].node_id.as_deref(), Some("L2-0"));
    }

    #[test]
    fn leaf_order_violation() {
        // Oracle: read the leaves under the root by hand: 0, 2, 1.
        let t = tree(
            "L2-0",
            vec![leaf(0, "a"), leaf(1, "b"), leaf(2, "c"), parent(2, 0, &["L1-0", "L1-2", "L1-1"])],
            3,
        );
        let order: Vec<_> = t.leaves_in_order().iter().map(|n| n.segment_index.unwrap()).collect();
        assert_eq!(order, vec![0, 2, 1]);
        assert_eq!(kinds(&t), vec![ViolationKind::LeafOrder]);
    }

    #[test]
    fn cycles_and_unreachable_nodes_are_reported() {
        let mut a = parent(2, 0, &["L2-1"]);
        a.level = 2;
        let mut b = parent(2, 1, &["L2-0"]);
        b.level = 2;
        let t = tree("L3-0", vec![parent(3, 0, &["L2-0"]), a, b, leaf(0, "z")], 1);
        let k = kinds(&t);
        assert!(k.contains(&ViolationKind::Cycle), "{k:?}");
        assert!(k.contains(&ViolationKind::Unreachable), "{k:?}");
        assert!(k.contains(&ViolationKind::MultipleParents), "{k:?}");
    }

    #[test]
    fn missing_root_and_dangling_child() {
        let t = tree("nope", vec![leaf(0, "a")], 1);
        assert!(kinds(&t).contains(&ViolationKind::MissingRoot));
        let t = tree("L2-0", vec![leaf(0, "a"), parent(2, 0, &["L1-0", "ghost"])], 1);
        assert!(kinds(&t).contains(&ViolationKind::DanglingChild));
    }

    #[test]
    fn single_leaf_root_is_valid() {
        let t = tree("L1-0", vec![leaf(0, "only")], 1);
        assert_eq!(t.validate(&WordPieceTokenizer), vec![]);
        assert_eq!(t.height(), 1);
    }

    #[test]
    fn action_codes() {
        assert_eq!(Action::Descend(3).code(), 3);
        assert_eq!(Action::Revert.code(), -1);
        assert_eq!(Action::Commit("x".into()).code(), -2);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        let mut t = tree("L1-0", vec![leaf(0, "only")], 1);
        t.source_hash = document_hash("original");
        t.save(&path).unwrap();
        assert!(MemoryTree::load_for_document(&path, "original").is_ok());
        assert!(matches!(
            MemoryTree::load_for_document(&path, "edited"),
            Err(Error::StaleCache { .. })
        ));
    }
}
