//! Dataset loading, grading, per-method evaluation, and the tree-shape sweep.

mod dataset;
mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_answer, Method};
use crate::builder::{checkpoint_path, TreeBuilder};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::llm::LlmClient;
use crate::model::MemoryTree;
use crate::navigator::Navigator;

pub use dataset::{extract_choice, grade_answer, load_dataset, normalize_answer, parse_dataset, Example};
pub use report::{
    reference_accuracy, reference_navigation, render_table, Bucket, BucketStats, ExampleRow, Report,
};

/// On-disk trees keyed by example id and construction settings.
#[derive(Debug, Clone)]
pub struct TreeCache {
    dir: PathBuf,
}

impl TreeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(TreeCache { dir })
    }

    pub fn path_for(&self, example_id: &str, config: &Config) -> PathBuf {
        let safe: String = example_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let hash = config.construction_hash();
        self.dir.join(format!("{safe}-{}.json", &hash[..16]))
    }

    /// Cached tree for `document`, building and storing it when absent or
    /// stale.
    pub fn get_or_build(
        &self,
        example_id: &str,
        document: &str,
        config: &Config,
        client: &LlmClient,
    ) -> Result<MemoryTree> {
        let path = self.path_for(example_id, config);
        if path.exists() {
            match MemoryTree::load_for_document(&path, document) {
                Ok(tree) => return Ok(tree),
                Err(e) => tracing::warn!("rebuilding {}: {e}", path.display()),
            }
        }
        let partial = checkpoint_path(&path);
        let tree = TreeBuilder::new(client, config)?
            .with_checkpoint(&partial)
            .build(document)?;
        tree.save(&path)?;
        let _ = std::fs::remove_file(&partial);
        Ok(tree)
    }
}

fn build_tree_for(
    example: &Example,
    config: &Config,
    client: &LlmClient,
    cache: Option<&TreeCache>,
) -> Result<MemoryTree> {
    match cache {
        Some(c) => c.get_or_build(&example.id, &example.context, config, client),
        None => TreeBuilder::new(client, config)?.build(&example.context),
    }
}

fn error_row(example: &Example, config: &Config, e: &Error) -> ExampleRow {
    ExampleRow {
        id: example.id.clone(),
        bucket: Bucket::of(example.context_tokens, config.long_threshold),
        correct: false,
        answer: None,
        no_answer: false,
        error: Some(e.to_string()),
        strayed: false,
        recovered: None,
        tokens_processed: 0,
        fraction_read: None,
        steps: 0,
        calls: 0,
    }
}

/// Run `method` on one example and grade it. Failures become error rows.
pub fn evaluate_example(
    method: Method,
    example: &Example,
    client: &LlmClient,
    config: &Config,
    cache: Option<&TreeCache>,
) -> ExampleRow {
    if method == Method::MemWalker {
        return match build_tree_for(example, config, client, cache) {
            Ok(tree) => evaluate_with_tree(example, &tree, client, config),
            Err(e) => failed(example, config, e),
        };
    }
    let run = || -> Result<ExampleRow> {
        let r = baseline_answer(
            method,
            &example.context,
            &example.query,
            example.options.as_deref(),
            client,
            config,
        )?;
        let doc_tokens = client.tokenizer().count(&example.context);
        let fraction = if doc_tokens == 0 { 0.0 } else { r.context_tokens as f64 / doc_tokens as f64 };
        let answer = r.outcome.answer().map(str::to_string);
        let correct = answer.as_deref().is_some_and(|a| grade_answer(a, example));
        Ok(ExampleRow {
            id: example.id.clone(),
            bucket: Bucket::of(example.context_tokens, config.long_threshold),
            correct,
            no_answer: answer.is_none(),
            answer,
            error: None,
            strayed: false,
            recovered: None,
            tokens_processed: r.context_tokens,
            fraction_read: Some(fraction),
            steps: r.calls,
            calls: r.calls,
        })
    };
    run().unwrap_or_else(|e| failed(example, config, e))
}

fn failed(example: &Example, config: &Config, e: Error) -> ExampleRow {
    tracing::warn!(example = %example.id, "evaluation failed: {e}");
    error_row(example, config, &e)
}

fn map_examples<F>(dataset: &[Example], parallelism: usize, f: F) -> Vec<ExampleRow>
where
    F: Fn(&Example) -> ExampleRow + Sync,
{
    let workers = parallelism.clamp(1, dataset.len().max(1));
    if workers == 1 {
        return dataset.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<ExampleRow>>> = Mutex::new(vec![None; dataset.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(ex) = dataset.get(i) else { break };
                let row = f(ex);
                rows.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(row);
            });
        }
    });
    rows.into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every example evaluated"))
        .collect()
}

/// Evaluate `method` over the dataset. Examples are independent; up to
/// `config.parallelism` run at once.
pub fn evaluate(
    method: Method,
    dataset: &[Example],
    client: &LlmClient,
    config: &Config,
    cache: Option<&TreeCache>,
) -> Report {
    let rows = map_examples(dataset, config.parallelism, |ex| {
        evaluate_example(method, ex, client, config, cache)
    });
    Report::from_rows(method, config.task, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub segment_size: usize,
    pub max_fanout: usize,
    pub n: usize,
    pub accuracy: f64,
    pub mean_height: f64,
    pub mean_node_count: f64,
    pub errors: usize,
}

/// Evaluate the tree reader at every (segment size, fanout) pair.
pub fn sweep_tree_configs(
    dataset: &[Example],
    segment_sizes: &[usize],
    max_fanouts: &[usize],
    client: &LlmClient,
    config: &Config,
    cache: Option<&TreeCache>,
) -> Result<Vec<SweepCell>> {
    if segment_sizes.is_empty() || max_fanouts.is_empty() {
        return Err(Error::InvalidInput("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &size in segment_sizes {
        for &fanout in max_fanouts {
            let cfg = config.with_shape(size, fanout);
            cfg.validate(client.tokenizer())?;
            let shapes: Mutex<Vec<(usize, usize)>> = Mutex::new(Vec::new());
            let rows = map_examples(dataset, cfg.parallelism, |ex| {
                match build_tree_for(ex, &cfg, client, cache) {
                    Ok(tree) => {
                        shapes
                            .lock()
                            .unwrap_or_else(|p| p.into_inner())
                            .push((tree.height(), tree.node_count()));
                        evaluate_with_tree(ex, &tree, client, &cfg)
                    }
                    Err(e) => failed(ex, &cfg, e),
                }
            });
            let shapes = shapes.into_inner().unwrap_or_else(|p| p.into_inner());
            let report = Report::from_rows(Method::MemWalker, cfg.task, rows);
            let k = shapes.len().max(1) as f64;
            cells.push(SweepCell {
                segment_size: size,
                max_fanout: fanout,
                n: report.n,
                accuracy: report.accuracy,
                mean_height: shapes.iter().map(|s| s.0 as f64).sum::<f64>() / k,
                mean_node_count: shapes.iter().map(|s| s.1 as f64).sum::<f64>() / k,
                errors: report.error_count,
            });
        }
    }
    Ok(cells)
}

fn evaluate_with_tree(example: &Example, tree: &MemoryTree, client: &LlmClient, config: &Config) -> ExampleRow {
    let run = || -> Result<ExampleRow> {
        let result = Navigator::new(tree, client, config)?.navigate(&example.query, example.options.as_deref())?;
        let answer = result.outcome.answer().map(str::to_string);
        let correct = answer.as_deref().is_some_and(|a| grade_answer(a, example));
        let m = result.metrics;
        Ok(ExampleRow {
            id: example.id.clone(),
            bucket: Bucket::of(example.context_tokens, config.long_threshold),
            correct,
            no_answer: answer.is_none(),
            answer,
            error: None,
            strayed: m.strayed,
            recovered: m.strayed.then_some(correct),
            tokens_processed: m.tokens_processed,
            fraction_read: Some(m.fraction_of_original),
            steps: m.steps,
            calls: m.steps,
        })
    };
    run().unwrap_or_else(|e| failed(example, config, e))
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cell in cells {
        w.serialize(cell)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
