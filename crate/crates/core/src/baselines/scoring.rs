use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::llm::BackendError;
use crate::model::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub segment_index: usize,
    pub score: f64,
}

/// Relevance of each segment to a query; one score per segment, in order.
pub trait SegmentScorer: Send + Sync {
    fn score(&self, query: &str, segments: &[Segment]) -> Result<Vec<f64>>;
}

/// Lowercased alphanumeric runs.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Cosine between tf-idf vectors, with raw counts for tf and a smoothed
/// idf of `ln((1 + N) / (1 + df)) + 1` over the segments.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfIdfScorer;

fn counts(text: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for t in terms(text) {
        *out.entry(t).or_insert(0.0) += 1.0;
    }
    out
}

impl SegmentScorer for TfIdfScorer {
    fn score(&self, query: &str, segments: &[Segment]) -> Result<Vec<f64>> {
        let docs: Vec<BTreeMap<String, f64>> = segments.iter().map(|s| counts(&s.text)).collect();
        let n = docs.len() as f64;
        let mut df: BTreeMap<&str, f64> = BTreeMap::new();
        for d in &docs {
            for t in d.keys() {
                *df.entry(t.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let idf = |t: &str| ((1.0 + n) / (1.0 + df.get(t).copied().unwrap_or(0.0))).ln() + 1.0;
        let weigh = |tf: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
            tf.iter().map(|(t, c)| (t.clone(), c * idf(t))).collect()
        };
        let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        let q = weigh(&counts(query));
        let qn = norm(&q);
        Ok(docs
            .iter()
            .map(|d| {
                let d = weigh(d);
                let dn = norm(&d);
                if qn == 0.0 || dn == 0.0 {
                    return 0.0;
                }
                let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
                dot / (qn * dn)
            })
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Dense scorer backed by an `/embeddings` endpoint; similarity is computed
/// locally.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    model: String,
}

impl EmbeddingScorer {
    pub fn new(api_base: &str, api_key: Option<String>, model: &str) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(EmbeddingScorer {
            client,
            url: format!("{}/embeddings", api_base.trim_end_matches('/')),
            api_key,
            model: model.to_string(),
        })
    }

    fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>, BackendError> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&json!({"model": self.model, "input": inputs}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Endpoint(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::Endpoint(format!("HTTP {status}: {e}")))?;
        if !status.is_success() {
            return Err(BackendError::Endpoint(format!("HTTP {status}: {body}")));
        }
        let data = body["data"]
            .as_array()
            .ok_or_else(|| BackendError::Endpoint("embedding response has no data".into()))?;
        let vectors: Option<Vec<Vec<f64>>> = data
            .iter()
            .map(|d| d["embedding"].as_array()?.iter().map(Value::as_f64).collect())
            .collect();
        match vectors {
            Some(v) if v.len() == inputs.len() => Ok(v),
            _ => Err(BackendError::Endpoint("malformed embedding vectors".into())),
        }
    }
}

impl SegmentScorer for EmbeddingScorer {
    fn score(&self, query: &str, segments: &[Segment]) -> Result<Vec<f64>> {
        let mut inputs = vec![query];
        inputs.extend(segments.iter().map(|s| s.text.as_str()));
        let vectors = self.embed(&inputs)?;
        Ok(vectors[1..].iter().map(|v| cosine(&vectors[0], v)).collect())
    }
}

/// Scores sorted best first; equal scores keep document order.
pub fn score_segments(query: &str, segments: &[Segment], scorer: &dyn SegmentScorer) -> Result<Vec<SegmentScore>> {
    let scores = scorer.score(query, segments)?;
    let mut ranked: Vec<SegmentScore> = scores
        .into_iter()
        .enumerate()
        .map(|(segment_index, score)| SegmentScore { segment_index, score })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.segment_index.cmp(&b.segment_index))
    });
    Ok(ranked)
}
