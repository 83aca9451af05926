use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::config::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Short,
    Long,
}

impl Bucket {
    pub fn of(context_tokens: usize, long_threshold: usize) -> Self {
        if context_tokens > long_threshold {
            Bucket::Long
        } else {
            Bucket::Short
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub bucket: Bucket,
    pub correct: bool,
    pub answer: Option<String>,
    pub no_answer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub strayed: bool,
    /// Strayed and still correct; absent for paths that never reverted.
    pub recovered: Option<bool>,
    pub tokens_processed: usize,
    pub fraction_read: Option<f64>,
    pub steps: usize,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub task: Task,
    pub n: usize,
    pub accuracy: f64,
    pub stray_ratio: f64,
    pub recovery_rate: Option<f64>,
    pub mean_fraction_read: Option<f64>,
    pub mean_fraction_read_successful: Option<f64>,
    pub no_answer_count: usize,
    pub error_count: usize,
    pub per_bucket: BTreeMap<Bucket, BucketStats>,
    pub per_example: Vec<ExampleRow>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Report {
    /// Aggregate per-example rows; every field is a fold over `rows`.
    pub fn from_rows(method: Method, task: Task, rows: Vec<ExampleRow>) -> Self {
        let n = rows.len();
        let correct = rows.iter().filter(|r| r.correct).count();
        let strayed = rows.iter().filter(|r| r.strayed).count();
        let recovered = rows.iter().filter(|r| r.strayed && r.correct).count();
        let mut per_bucket = BTreeMap::new();
        for bucket in [Bucket::Short, Bucket::Long] {
            let in_bucket: Vec<&ExampleRow> = rows.iter().filter(|r| r.bucket == bucket).collect();
            let c = in_bucket.iter().filter(|r| r.correct).count();
            per_bucket.insert(
                bucket,
                BucketStats {
                    n: in_bucket.len(),
                    correct: c,
                    accuracy: ratio(c, in_bucket.len()),
                },
            );
        }
        Report {
            method,
            task,
            n,
            accuracy: ratio(correct, n).unwrap_or(0.0),
            stray_ratio: ratio(strayed, n).unwrap_or(0.0),
            recovery_rate: ratio(recovered, strayed),
            mean_fraction_read: mean(rows.iter().filter_map(|r| r.fraction_read)),
            mean_fraction_read_successful: mean(
                rows.iter().filter(|r| r.correct).filter_map(|r| r.fraction_read),
            ),
            no_answer_count: rows.iter().filter(|r| r.no_answer).count(),
            error_count: rows.iter().filter(|r| r.error.is_some()).count(),
            per_bucket,
            per_example: rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        render_table(std::slice::from_ref(self))
    }
}

/// Published accuracies from live runs with a 70B chat model and a
/// 4096-token window, as (orig, long) percentages.
pub fn reference_accuracy(task: Task, method: Method) -> Option<(f64, f64)> {
    use Method::*;
    use Task::*;
    Some(match (task, method) {
        (Quality, Recurrence) => (51.3, 56.0),
        (Quality, Retrieval) => (63.1, 64.8),
        (Quality, FullLeft) => (56.7, 64.8),
        (Quality, FullRight) => (70.1, 72.5),
        (Quality, MemWalker) => (67.4, 73.6),
        (SummScreenFd, Recurrence) => (47.7, 45.4),
        (SummScreenFd, Retrieval) => (63.7, 62.2),
        (SummScreenFd, FullLeft) => (62.7, 62.7),
        (SummScreenFd, FullRight) => (64.7, 63.1),
        (SummScreenFd, MemWalker) => (67.3, 64.5),
        (GovReport, Recurrence) => (35.6, 33.8),
        (GovReport, Retrieval) => (54.0, 52.1),
        (GovReport, FullLeft) => (59.4, 56.3),
        (GovReport, FullRight) => (50.5, 50.0),
        (GovReport, MemWalker) => (59.4, 60.4),
    })
}

/// Published stray ratio and recovery rate (percent) for the tree reader.
pub fn reference_navigation(task: Task) -> (f64, f64) {
    match task {
        Task::Quality => (15.0, 70.0),
        Task::SummScreenFd => (18.6, 59.6),
        Task::GovReport => (18.8, 79.0),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0))
}

/// Fixed-width comparison table with an "Orig. / Long" accuracy column per
/// report, followed by the live-run reference values.
pub fn render_table(reports: &[Report]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>13} {:>7} {:>8} {:>7} {:>9}",
        "Method", "N", "Orig. / Long", "Stray", "Recovery", "Read", "NoAnswer"
    );
    for r in reports {
        let long = r.per_bucket.get(&Bucket::Long).and_then(|b| b.accuracy);
        let navigation = r.method == Method::MemWalker;
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>13} {:>7} {:>8} {:>7} {:>9}",
            r.method.name(),
            r.n,
            format!("{} / {}", pct(Some(r.accuracy)), pct(long)),
            if navigation { pct(Some(r.stray_ratio)) } else { "-".into() },
            if navigation { pct(r.recovery_rate) } else { "-".into() },
            pct(r.mean_fraction_read),
            r.no_answer_count,
        );
    }
    out.push_str("\nReference (live 70B model, 4096-token window; not reproducible at desk scale):\n");
    for r in reports {
        if let Some((orig, long)) = reference_accuracy(r.task, r.method) {
            let _ = write!(out, "  {} {}: {orig:.1} / {long:.1}", r.task, r.method.name());
            if r.method == Method::MemWalker {
                let (stray, recovery) = reference_navigation(r.task);
                let _ = write!(out, ", stray {stray:.1}, recovery {recovery:.1}");
            }
            out.push('\n');
        }
    }
    out
}
