//! Desk-scale acceptance suite. Every check runs against scripted or
//! deterministic backends, with no network. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! `MEMWALKER_BLESS=1 cargo test --test acceptance` regenerates the golden
//! fixtures under tests/fixtures/golden.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use memwalker::baselines::{full_context_answer, recurrence_answer, retrieval_answer, Method};
use memwalker::builder::{expected_height, expected_node_count};
use memwalker::eval::{evaluate, Bucket, Example};
use memwalker::llm::{Backend, BackendError, CompletionRequest, FnBackend, ScriptedBackend, TraceLog};
use memwalker::model::validate_tree;
use memwalker::navigator::{
    read_trajectory, render_transcript, update_working_memory, write_trajectory, Content, ManualClock,
    MemoryEntry, NavigationResult, NoAnswerReason, StepKind, WorkingMemory,
};
use memwalker::prompts::{parse_response, NodeKind, ParsedResponse};
use memwalker::tokenize::{count_tokens, default_tokenizer, Side};
use memwalker::{Action, Config, Grouping, LlmClient, MemoryTree, Navigator, Outcome, Task, TreeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn client(backend: impl Backend + 'static, window: usize) -> LlmClient {
    LlmClient::new(Arc::new(backend), default_tokenizer(), window)
}

/// Stable string hash so generated summaries do not depend on the process.
fn fnv(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Summaries made of words picked from the prompt, between 1 and
/// `max_words` long, determined by the prompt alone.
fn summarizer(max_words: usize) -> impl Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync {
    move |req: &CompletionRequest| {
        let words: Vec<&str> = req.prompt.split_whitespace().collect();
        let h = fnv(&req.prompt) as usize;
        let n = 1 + h % max_words;
        Ok((0..n).map(|i| words[(h / 7 + i * 13) % words.len()]).collect::<Vec<_>>().join(" "))
    }
}

/// `n` random words of 1 to 4 lowercase letters, one token each.
fn one_token_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
        })
        .collect()
}

fn words_of(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> String {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn navigate_with_manual_clock(
    tree: &MemoryTree,
    client: &LlmClient,
    config: &Config,
    query: &str,
    options: Option<&[String]>,
) -> NavigationResult {
    Navigator::new(tree, client, config)
        .unwrap()
        .with_clock(Arc::new(ManualClock::default()))
        .navigate(query, options)
        .unwrap()
}

// Golden walk ---------------------------------------------------------------

const GOLDEN_QUERY: &str = "Why did Ro stop thinking the people from Earth were backwards?";

fn golden_options() -> Vec<String> {
    [
        "He saw that their advanced society had made marriage needlessly complicated.",
        "He learned that Earthmen were stronger than Martians.",
        "He was impressed by how loudly they argued.",
        "He discovered that they could climb cliffs without ropes.",
    ]
    .map(String::from)
    .to_vec()
}

fn golden_script() -> Vec<String> {
    [
        "Reasoning: Summary 0 covers Ro's first meetings with the people from Earth and how they behave, so it most likely explains his change of view.\nAction: 0",
        "Reasoning: Summary 1 describes how the Earthmen handle a quarrel, which bears on whether they are backwards.\nAction: 1",
        "Reasoning: The text does not explicitly mention Ro changing his mind about the people from Earth being backwards. Therefore, the answer cannot be inferred from the text.\nAction: -1",
        "Reasoning: Summary 2 describes a raid and the limits of Earth machines, which comes closer to Ro's final judgement.\nAction: 2",
        "Reasoning: Ro first sees Earth's customs as backward compared to Mars. After hearing how marriage works on Earth he concludes the people are advanced but over-complicated.\nAction: -2\nAnswer: (A)",
    ]
    .map(String::from)
    .to_vec()
}

const GOLDEN_LEAF_SUMMARIES: [&str; 6] = [
    "Ro, a young Martian, lives in a canal village that values water rights and strong climbers.",
    "Earthmen land in the valley; Ro thinks their quiet, helmeted ways make them frail.",
    "Two Earthmen quarrel over a woman by sulking and writing letters instead of fighting.",
    "Earth weapons drive off the Oan raiders, but the Earthmen cannot lift water jars.",
    "The expedition leader explains Earth marriage, which Ro finds needlessly complicated.",
    "Ro decides the Earthmen are tangled rather than backwards and laughs at the idea of lawyers.",
];

fn golden_config() -> Config {
    let text = std::fs::read_to_string(fixtures().join("config.toml")).unwrap();
    Config::layered(None, &text).unwrap()
}

fn bless_golden() {
    let dir = fixtures();
    let document = std::fs::read_to_string(dir.join("document.txt")).unwrap();
    let total = count_tokens(&document);
    let tok = default_tokenizer();
    let segment_size = (1..=total)
        .find(|&s| memwalker::tokenize::split_into_segments(tok.as_ref(), &document, s).unwrap().len() <= 6)
        .unwrap();
    let config_text = format!("task = \"quality\"\nsegment_size = {segment_size}\nmax_fanout = 3\n");
    std::fs::write(dir.join("config.toml"), &config_text).unwrap();
    let config = golden_config();

    let next = AtomicUsize::new(0);
    let backend = FnBackend(move |req: &CompletionRequest| {
        assert_eq!(req.tag, "summarize-leaf", "group summaries should pass through");
        Ok::<_, BackendError>(GOLDEN_LEAF_SUMMARIES[next.fetch_add(1, Ordering::SeqCst)].to_string())
    });
    let builder_client = client(backend, config.context_window);
    let tree = TreeBuilder::new(&builder_client, &config).unwrap().build(&document).unwrap();
    assert_eq!(tree.leaf_count(), 6);
    assert_eq!(tree.root_id, "L3-0");
    tree.save(&dir.join("tree.json")).unwrap();

    let script: String = golden_script()
        .iter()
        .map(|r| serde_json::json!({ "response": r }).to_string() + "\n")
        .collect();
    std::fs::write(dir.join("script.jsonl"), script).unwrap();

    let nav_client = client(ScriptedBackend::load(&dir.join("script.jsonl")).unwrap(), config.context_window);
    let r = navigate_with_manual_clock(&tree, &nav_client, &config, GOLDEN_QUERY, Some(&golden_options()));
    write_trajectory(&dir.join("trajectory.jsonl"), &r.trajectory).unwrap();
    std::fs::write(dir.join("transcript.txt"), render_transcript(&r.trajectory)).unwrap();
}

fn criterion_1() {
    let dir = fixtures();
    let config = golden_config();
    let tree = MemoryTree::load(&dir.join("tree.json")).unwrap();
    assert!(validate_tree(&tree, default_tokenizer().as_ref()).is_empty());
    assert_eq!(tree.root_id, "L3-0");
    assert_eq!(tree.leaf_count(), 6);

    let backend = Arc::new(ScriptedBackend::load(&dir.join("script.jsonl")).unwrap());
    let nav_client = LlmClient::new(backend.clone(), default_tokenizer(), config.context_window);
    let r = navigate_with_manual_clock(&tree, &nav_client, &config, GOLDEN_QUERY, Some(&golden_options()));
    assert_eq!(r.outcome, Outcome::Answered { answer: "(A)".into() });
    assert!(r.metrics.strayed);
    assert_eq!(r.metrics.steps, 5);
    assert_eq!(backend.consumed(), 5);
    let actions: Vec<Action> = r.trajectory.iter().filter_map(|s| s.action().cloned()).collect();
    assert_eq!(
        actions,
        [
            Action::Descend(0),
            Action::Descend(1),
            Action::Revert,
            Action::Descend(2),
            Action::Commit("(A)".into())
        ]
    );

    let tmp = tempfile::tempdir().unwrap();
    let written = tmp.path().join("trajectory.jsonl");
    write_trajectory(&written, &r.trajectory).unwrap();
    let golden_trajectory = std::fs::read_to_string(dir.join("trajectory.jsonl")).unwrap();
    assert_eq!(std::fs::read_to_string(&written).unwrap(), golden_trajectory);

    let golden_transcript = std::fs::read_to_string(dir.join("transcript.txt")).unwrap();
    let replayed = render_transcript(&read_trajectory(&dir.join("trajectory.jsonl")).unwrap());
    assert_eq!(replayed, golden_transcript);
    assert_eq!(render_transcript(&r.trajectory), golden_transcript);
}

// Three strikes -------------------------------------------------------------

/// Six 20-token segments, leaf summaries "leaf wN", parents passing through.
fn small_tree(segments: usize, fanout: usize) -> (MemoryTree, Config) {
    let document = (0..segments)
        .map(|i| vec![format!("w{i}"); 20].join(" "))
        .collect::<Vec<_>>()
        .join(" ");
    let config = Config {
        segment_size: 20,
        max_fanout: fanout,
        ..Config::default()
    };
    let backend = FnBackend(|req: &CompletionRequest| {
        let word = req.prompt.split_whitespace().next().unwrap_or("").to_string();
        Ok::<_, BackendError>(format!("leaf {word}"))
    });
    let tree = TreeBuilder::new(&client(backend, 4096), &config).unwrap().build(&document).unwrap();
    (tree, config)
}

fn scripted_run(tree: &MemoryTree, config: &Config, responses: &[&str]) -> (NavigationResult, usize) {
    let backend = Arc::new(ScriptedBackend::responses(responses.iter().copied()));
    let c = LlmClient::new(backend.clone(), default_tokenizer(), config.context_window);
    let r = navigate_with_manual_clock(tree, &c, config, "Why?", None);
    (r, backend.consumed())
}

fn criterion_2() {
    let (tree, config) = small_tree(6, 3);
    let (r, used) = scripted_run(&tree, &config, &["no idea", "still no idea", "Action: x", "Action: 0"]);
    assert_eq!(r.outcome, Outcome::NoAnswer { reason: NoAnswerReason::InvalidStreak });
    assert_eq!(used, 3);
    assert_eq!(r.metrics.steps, 3);
    assert!(r.trajectory.iter().all(|s| s.node_id == tree.root_id));

    // Two invalid, one valid, two invalid, then a valid walk to a commit.
    let (r, used) = scripted_run(
        &tree,
        &config,
        &["junk", "Action: 7", "Action: 0", "junk", "Action: -2", "Action: 1", "Action: -2\nAnswer: (B)"],
    );
    assert_eq!(r.outcome, Outcome::Answered { answer: "(B)".into() });
    assert_eq!(used, 7);
    assert_eq!(r.metrics.steps, 7);
}

// Tree construction ---------------------------------------------------------

fn criterion_3() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tok = default_tokenizer();
    for case in 0..220 {
        let segments = rng.random_range(1..=40);
        let segment_size = rng.random_range(10..=40);
        let fanout = rng.random_range(2..=8);
        let total = (segments - 1) * segment_size + rng.random_range(1..=segment_size);
        let document = one_token_words(&mut rng, total).join(" ");
        let config = Config {
            segment_size,
            max_fanout: fanout,
            grouping: if rng.random_bool(0.5) { Grouping::Greedy } else { Grouping::Balanced },
            summary_budget: rng.random_bool(0.5).then(|| rng.random_range(4..=30)),
            ..Config::default()
        };
        let c = client(FnBackend(summarizer(60)), config.context_window);
        let tree = TreeBuilder::new(&c, &config).unwrap().build(&document).unwrap();

        let violations = validate_tree(&tree, tok.as_ref());
        assert!(violations.is_empty(), "case {case}: {violations:?}");
        assert_eq!(tree.leaf_count(), total.div_ceil(segment_size), "case {case}");

        // Independent level recurrence: each level has ceil(prev / fanout) nodes.
        let mut level = segments;
        let (mut height, mut nodes) = (1, segments);
        while level > 1 {
            level = level.div_ceil(fanout);
            height += 1;
            nodes += level;
        }
        assert_eq!(tree.height(), height, "case {case}");
        assert_eq!(tree.node_count(), nodes, "case {case}");
        assert_eq!(expected_height(segments, fanout), height);
        assert_eq!(expected_node_count(segments, fanout), nodes);

        let json = tree.to_json();
        let back = MemoryTree::from_json(&json).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.to_json(), json);

        let again = TreeBuilder::new(&c, &config).unwrap().build(&document).unwrap();
        assert_eq!(again.to_json(), json, "case {case}: rebuild differs");
    }
}

// Randomized navigations, shared by criteria 4 to 6 -------------------------

/// Checks every prompt against the window, then answers at random.
struct Guarded {
    window: usize,
    reserve: usize,
    violations: AtomicUsize,
    prompts: AtomicUsize,
    rng: Mutex<ChaCha8Rng>,
    summary_words: usize,
}

impl Backend for Guarded {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        self.prompts.fetch_add(1, Ordering::Relaxed);
        if count_tokens(&req.prompt) + self.reserve > self.window {
            self.violations.fetch_add(1, Ordering::Relaxed);
        }
        let mut rng = self.rng.lock().unwrap();
        if req.tag.starts_with("summarize") || req.tag == "recompress" {
            let n = rng.random_range(1..=self.summary_words);
            return Ok(words_of(&mut rng, n, 9));
        }
        let len = rng.random_range(0..40);
        let reasoning = format!("Reasoning: {}\n", words_of(&mut rng, len, 8));
        Ok(match rng.random_range(0..10) {
            0 => "I am not sure.".to_string(),
            1 => format!("{reasoning}Action: -1"),
            2 => format!("{reasoning}Action: -2\nAnswer: ({})", rng.random_range(b'A'..=b'D') as char),
            3 => format!("{reasoning}Action: {}", rng.random_range(0..12)),
            4 => "Action: -2".to_string(),
            _ => format!("{reasoning}Action: {}", rng.random_range(0..3)),
        })
    }
}

struct RunRecord {
    result: NavigationResult,
    tree: MemoryTree,
    memory_budget: usize,
    violations: usize,
}

fn random_config(rng: &mut ChaCha8Rng) -> Config {
    loop {
        let reserve = rng.random_range(64..=400);
        let config = Config {
            context_window: rng.random_range(700..=3000),
            generation_reserve: reserve,
            max_new_tokens: reserve,
            segment_size: rng.random_range(20..=250),
            max_fanout: rng.random_range(2..=8),
            ..Config::default()
        };
        if config.validate(default_tokenizer().as_ref()).is_ok() {
            return config;
        }
    }
}

fn random_runs() -> &'static [RunRecord] {
    static RUNS: OnceLock<Vec<RunRecord>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..250)
            .map(|_| {
                let config = random_config(&mut rng);
                let segments = rng.random_range(1..=30);
                let doc_words = segments * config.segment_size / 2;
                let document = words_of(&mut rng, doc_words.max(1), 7);
                let guarded = Arc::new(Guarded {
                    window: config.context_window,
                    reserve: config.generation_reserve,
                    violations: AtomicUsize::new(0),
                    prompts: AtomicUsize::new(0),
                    rng: Mutex::new(ChaCha8Rng::seed_from_u64(rng.random())),
                    summary_words: config.summary_budget() * 2,
                });
                let c = LlmClient::new(guarded.clone(), default_tokenizer(), config.context_window);
                let tree = TreeBuilder::new(&c, &config).unwrap().build(&document).unwrap();
                let len = rng.random_range(3..=40);
                let query = words_of(&mut rng, len, 8);
                let options: Option<Vec<String>> = rng.random_bool(0.6).then(|| {
                    (0..4)
                        .map(|_| {
                            let len = rng.random_range(1..=30);
                            words_of(&mut rng, len, 8)
                        })
                        .collect()
                });
                // A prompt the client refuses as over budget surfaces here.
                let result = Navigator::new(&tree, &c, &config)
                    .unwrap()
                    .with_clock(Arc::new(ManualClock::default()))
                    .navigate(&query, options.as_deref())
                    .unwrap_or_else(|e| panic!("navigation failed: {}", e.source));
                RunRecord {
                    memory_budget: config.working_memory_budget(),
                    violations: guarded.violations.load(Ordering::Relaxed),
                    result,
                    tree,
                }
            })
            .collect()
    })
}

fn criterion_4() {
    let runs = random_runs();
    assert!(runs.len() >= 200);
    let prompted: usize = runs.iter().map(|r| r.result.metrics.steps).sum();
    assert!(prompted >= 500, "only {prompted} navigation prompts exercised");
    for (i, run) in runs.iter().enumerate() {
        assert_eq!(run.violations, 0, "run {i} sent an over-budget prompt");
    }
}

fn criterion_5() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, run) in random_runs().iter().enumerate() {
        let path = tmp.path().join(format!("{i}.jsonl"));
        write_trajectory(&path, &run.result.trajectory).unwrap();
        let stored = read_trajectory(&path).unwrap();
        let fold: usize = stored.iter().flat_map(|s| &s.presented).map(|p| p.tokens).sum();
        let m = &run.result.metrics;
        assert_eq!(m.tokens_processed, fold, "run {i}");
        assert_eq!(m.original_tokens, run.tree.document_tokens());
        assert_eq!(m.fraction_of_original, fold as f64 / m.original_tokens as f64);
        assert_eq!(m.strayed, stored.iter().any(|s| s.action() == Some(&Action::Revert)));
    }

    // Leaf summaries "leaf wN" are 2 tokens, parents of three are 6, and
    // every segment is 20 tokens.
    let (six, config) = small_tree(6, 3);
    // Root (6 + 6), L2-1 (2 + 2 + 2), leaf: memory L2-1 (6) + segment (20).
    let (r, _) = scripted_run(&six, &config, &["Action: 1", "Action: 0", "Action: -2\nAnswer: a"]);
    assert_eq!(r.metrics.tokens_processed, 44);
    assert_eq!(r.metrics.fraction_of_original, 44.0 / 120.0);
    // Root 12, L2-0 6, leaf 6 + 20, L2-0 again 6, leaf 6 + 20.
    let (r, _) = scripted_run(
        &six,
        &config,
        &["Action: 0", "Action: 1", "Action: -1", "Action: 2", "Action: -2\nAnswer: a"],
    );
    assert_eq!(r.metrics.tokens_processed, 76);
    assert_eq!(r.metrics.fraction_of_original, 76.0 / 120.0);
    // Four leaves under fanout 3: the root shows 6 + 2 twice (one invalid
    // reply), L2-1 has one child so it is entered without a prompt, and the
    // leaf shows memory L2-1 (2) + segment (20).
    let (four, config) = small_tree(4, 3);
    let (r, used) = scripted_run(&four, &config, &["hmm", "Action: 1", "Action: -2\nAnswer: a"]);
    assert_eq!(used, 3);
    assert!(r.trajectory.iter().any(|s| s.kind == StepKind::AutoDescend));
    assert_eq!(r.metrics.tokens_processed, 38);
    assert_eq!(r.metrics.fraction_of_original, 38.0 / 80.0);
}

fn criterion_6() {
    let tok = default_tokenizer();
    let entry = |id: &str, tokens: usize| MemoryEntry::new(tok.as_ref(), id, vec!["m"; tokens].join(" "));
    let ids = |m: &[MemoryEntry]| m.iter().map(|e| e.node_id.clone()).collect::<Vec<_>>();

    let out = update_working_memory(&[entry("A", 100)], entry("B", 100), 250);
    assert_eq!(ids(&out), ["A", "B"]);
    let out = update_working_memory(&[entry("A", 100), entry("B", 100)], entry("C", 100), 250);
    assert_eq!(ids(&out), ["B", "C"]);
    let mut m = WorkingMemory::new();
    m.push(entry("A", 100), 250);
    m.push(entry("B", 100), 250);
    assert_eq!(m.remove("B").map(|e| e.node_id), Some("B".into()));
    assert_eq!(ids(m.entries()), ["A"]);

    // Random push/remove sequences against a queue model.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let budget = rng.random_range(0..=300);
        let mut memory = WorkingMemory::new();
        let mut model: VecDeque<(String, usize)> = VecDeque::new();
        for step in 0..40 {
            if rng.random_bool(0.3) && !model.is_empty() {
                let k = rng.random_range(0..model.len());
                let id = model[k].0.clone();
                memory.remove(&id);
                model.remove(k);
            } else {
                let tokens = rng.random_range(1..=120);
                let id = format!("n{step}");
                memory.push(entry(&id, tokens), budget);
                model.push_back((id, tokens));
                while model.iter().map(|e| e.1).sum::<usize>() > budget {
                    model.pop_front();
                }
            }
            assert!(memory.total_tokens() <= budget);
            let expected: Vec<&str> = model.iter().map(|e| e.0.as_str()).collect();
            assert_eq!(ids(memory.entries()), expected);
        }
    }

    // Memory shown at leaf steps never exceeds its budget.
    for run in random_runs() {
        for step in run.result.trajectory.iter().filter(|s| s.kind == StepKind::Leaf) {
            let memory: usize = step
                .presented
                .iter()
                .filter(|p| p.content == Content::Summary)
                .map(|p| p.tokens)
                .sum();
            assert!(memory <= run.memory_budget, "{memory} > {}", run.memory_budget);
        }
    }
}

// Baselines ------------------------------------------------------------------

fn answering_client(log: &Arc<TraceLog>, window: usize) -> LlmClient {
    client(FnBackend(|_: &CompletionRequest| Ok::<_, BackendError>("Answer: (A)".into())), window)
        .with_trace(log.clone())
}

fn tfidf_oracle(query: &str, segments: &[Vec<String>]) -> Vec<f64> {
    fn counts(words: &[String]) -> BTreeMap<&str, f64> {
        let mut m = BTreeMap::new();
        for w in words {
            *m.entry(w.as_str()).or_default() += 1.0;
        }
        m
    }
    let docs: Vec<BTreeMap<&str, f64>> = segments.iter().map(|s| counts(s)).collect();
    let n = docs.len() as f64;
    let idf = |t: &str| {
        let df = docs.iter().filter(|d| d.contains_key(t)).count() as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    };
    let q_words: Vec<String> = query.split(' ').map(String::from).collect();
    let q: BTreeMap<&str, f64> = counts(&q_words).into_iter().map(|(t, c)| (t, c * idf(t))).collect();
    let qn = q.values().map(|x| x * x).sum::<f64>().sqrt();
    docs.iter()
        .map(|d| {
            let d: BTreeMap<&str, f64> = d.iter().map(|(t, c)| (*t, c * idf(t))).collect();
            let dn = d.values().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
            if qn == 0.0 || dn == 0.0 {
                0.0
            } else {
                dot / (qn * dn)
            }
        })
        .collect()
}

fn criterion_7() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Truncated full context: an exact token prefix or suffix, as long as fits.
    for case in 0..6 {
        let len = rng.random_range(5000..9000);
        let words = one_token_words(&mut rng, len);
        let document = words.join(" ");
        let config = Config::default();
        let options = (case % 2 == 0).then(golden_options);
        for side in [Side::KeepLeft, Side::KeepRight] {
            let log = Arc::new(TraceLog::in_memory());
            let c = answering_client(&log, config.context_window);
            let r = full_context_answer(&document, "What happened?", options.as_deref(), side, &c, &config).unwrap();
            let k = r.context_tokens;
            let expected = match side {
                Side::KeepLeft => words[..k].join(" "),
                Side::KeepRight => words[words.len() - k..].join(" "),
            };
            let record = &log.records()[0];
            assert!(record.prompt.contains(&expected), "case {case} {side:?}");
            let longer = match side {
                Side::KeepLeft => words[..k + 1].join(" "),
                Side::KeepRight => words[words.len() - k - 1..].join(" "),
            };
            assert!(!record.prompt.contains(&longer));
            assert_eq!(record.prompt_tokens + config.generation_reserve, config.context_window);
        }
    }

    // Retrieval against a brute-force greedy selection over an independent
    // tf-idf ranking.
    let vocabulary = one_token_words(&mut rng, 40);
    for case in 0..50 {
        let segment_size = rng.random_range(40..=250);
        let total = rng.random_range(300..=4000);
        let words: Vec<String> = (0..total)
            .map(|_| vocabulary[rng.random_range(0..vocabulary.len())].clone())
            .collect();
        let query = (0..rng.random_range(3..=8))
            .map(|_| vocabulary[rng.random_range(0..vocabulary.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let config = Config {
            segment_size,
            context_window: rng.random_range(1200..=2500),
            retrieval_document_order: rng.random_bool(0.3),
            ..Config::default()
        };
        let chunks: Vec<Vec<String>> = words.chunks(segment_size).map(<[String]>::to_vec).collect();
        let scores = tfidf_oracle(&query, &chunks);
        let mut ranking: Vec<usize> = (0..chunks.len()).collect();
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

        let log = Arc::new(TraceLog::in_memory());
        let c = answering_client(&log, config.context_window);
        let r = retrieval_answer(&words.join(" "), &query, None, &c, &config).unwrap();
        let prompt_tokens = log.records()[0].prompt_tokens;
        let k = r.selected_segments.len();
        let mut expected: Vec<usize> = ranking[..k].to_vec();
        let used: usize = expected.iter().map(|&i| chunks[i].len()).sum();
        assert_eq!(r.context_tokens, used, "case {case}");
        if let Some(&next) = ranking.get(k) {
            assert!(
                prompt_tokens + config.generation_reserve + chunks[next].len() > config.context_window,
                "case {case}: segment {next} would still fit"
            );
        }
        if config.retrieval_document_order {
            expected.sort_unstable();
        }
        assert_eq!(r.selected_segments, expected, "case {case}");
    }

    // Recurrence: one call per segment, carried summaries capped.
    for n in 2..=6 {
        let config = Config {
            recurrence_segment_size: 200,
            ..Config::default()
        };
        let document = one_token_words(&mut rng, 200 * n).join(" ");
        let calls = AtomicUsize::new(0);
        let backend = FnBackend(move |req: &CompletionRequest| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok::<_, BackendError>(if req.tag == "recurrence" {
                vec!["note"; 800].join(" ")
            } else {
                "Answer: (C)".to_string()
            })
        });
        let log = Arc::new(TraceLog::in_memory());
        let c = client(backend, config.context_window).with_trace(log.clone());
        let r = recurrence_answer(&document, "Who?", None, &c, &config).unwrap();
        assert_eq!(r.calls, n);
        assert_eq!(log.len(), n);
        assert_eq!(r.summaries.len(), n - 1);
        assert!(r.summaries.iter().all(|s| count_tokens(s) <= 500));
        assert_eq!(r.outcome.answer(), Some("(C)"));
    }
}

// Parser corpus ---------------------------------------------------------------

fn criterion_8() {
    use NodeKind::{Leaf, NonLeaf};
    let ok = |reasoning: Option<&str>, action: Action| ParsedResponse {
        reasoning: reasoning.map(String::from),
        answer: match &action {
            Action::Commit(a) => Some(a.clone()),
            _ => None,
        },
        action,
    };
    let table_triage = "Reasoning: Summary 0 is most likely to contain information about why Ro changed his mind about the people on Mars being backwards, as it mentions Ro's interactions with the people from Earth and their advanced method of communication.\nAction: 0";
    let table_revert = "Reasoning: The text does not explicitly mention Ro changing his mind about the people on Mars being backwards. Therefore, the answer cannot be inferred from the text.\nAction: -1";
    let table_commit = "Reasoning: Ro initially sees Earth's customs as backward compared to Mars, However, after discussing [...]\nAction: -2\nAnswer: (A)";
    let screen_triage = "Reasoning: Summary 2 provides more information about Michael giving a presentation to business students, making it more relevant to the question about who invited Michael to his business school as a guest speaker.\nAction: 2";
    let screen_revert = "Reasoning: The text does not explicitly mention who invited Michael to the business school as a guest speaker.\nAction: -1";
    let screen_back = "Reasoning: Summary 0 contains information about Michael, Ryan, and Kevin going to give a speech at a business school. This summary is the most relevant to the question about who invited Michael to the business school as a guest speaker.\nAction: 0";
    let screen_commit = "Reasoning: Ryan mentioned that Michael would be a guest speaker in his Emerging Enterprises class.\nAction: -2\nAnswer: Ryan";

    let reasoning_of = |raw: &str| raw.lines().next().unwrap().trim_start_matches("Reasoning: ").to_string();
    let valid: Vec<(&str, NodeKind, usize, ParsedResponse)> = vec![
        (table_triage, NonLeaf, 2, ok(Some(&reasoning_of(table_triage)), Action::Descend(0))),
        (table_revert, Leaf, 0, ok(Some(&reasoning_of(table_revert)), Action::Revert)),
        (table_commit, Leaf, 0, ok(Some(&reasoning_of(table_commit)), Action::Commit("(A)".into()))),
        (screen_triage, NonLeaf, 3, ok(Some(&reasoning_of(screen_triage)), Action::Descend(2))),
        (screen_revert, Leaf, 0, ok(Some(&reasoning_of(screen_revert)), Action::Revert)),
        (screen_back, NonLeaf, 3, ok(Some(&reasoning_of(screen_back)), Action::Descend(0))),
        (screen_commit, Leaf, 0, ok(Some(&reasoning_of(screen_commit)), Action::Commit("Ryan".into()))),
        ("Action: 2", NonLeaf, 3, ok(None, Action::Descend(2))),
        ("Action: -1", NonLeaf, 3, ok(None, Action::Revert)),
        ("Action: 0", NonLeaf, 1, ok(None, Action::Descend(0))),
        ("Action: -2\nAnswer: Ryan", Leaf, 0, ok(None, Action::Commit("Ryan".into()))),
        ("action: 1", NonLeaf, 2, ok(None, Action::Descend(1))),
        ("**Action:** 3", NonLeaf, 4, ok(None, Action::Descend(3))),
        ("Action: 1.", NonLeaf, 2, ok(None, Action::Descend(1))),
        ("Action: Summary 1", NonLeaf, 2, ok(None, Action::Descend(1))),
        ("  Action:   -1  ", Leaf, 0, ok(None, Action::Revert)),
        (
            "Reasoning: two\nlines\n###\nAction: 0",
            NonLeaf,
            2,
            ok(Some("two\nlines"), Action::Descend(0)),
        ),
        (
            "Action: 0\nReasoning: changed my mind.\nAction: 1",
            NonLeaf,
            2,
            ok(Some("changed my mind."), Action::Descend(1)),
        ),
        (
            "Action: -2\nAnswer: (D)\n###",
            Leaf,
            0,
            ok(None, Action::Commit("(D)".into())),
        ),
        ("Answer: (B)\nAction: -2", Leaf, 0, ok(None, Action::Commit("(B)".into()))),
    ];
    assert!(valid.len() >= 20);
    for (raw, kind, n, expected) in &valid {
        assert_eq!(parse_response(raw, *kind, *n).as_ref(), Ok(expected), "{raw:?}");
    }

    let malformed: Vec<(&str, NodeKind, usize)> = vec![
        ("", NonLeaf, 2),
        ("I think the second summary.", NonLeaf, 2),
        ("Action:", NonLeaf, 2),
        ("Action: two", NonLeaf, 2),
        ("Action: 2", NonLeaf, 2),
        ("Action: -2", NonLeaf, 2),
        ("Action: 0", Leaf, 0),
        ("Action: -2", Leaf, 0),
        ("Action: -3", Leaf, 0),
    ];
    assert!(malformed.len() >= 5);
    for (raw, kind, n) in &malformed {
        assert!(parse_response(raw, *kind, *n).is_err(), "{raw:?} should not parse");
    }
}

// Defaults parity -------------------------------------------------------------

fn criterion_9() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for (task, fanout, segment) in [
        (Task::Quality, 8, 1000),
        (Task::SummScreenFd, 5, 1000),
        (Task::GovReport, 8, 1200),
    ] {
        let from_file = Config::load(&shipped.join(format!("{}.toml", task.name()))).unwrap();
        for c in [Config::for_task(task), from_file] {
            assert_eq!(c.task, task);
            assert_eq!(c.max_fanout, fanout, "{task:?}");
            assert_eq!(c.segment_size, segment, "{task:?}");
            assert_eq!(c.context_window, 4096);
            assert_eq!(c.recurrence_segment_size, 2500);
            assert_eq!(c.recurrence_summary_budget, 500);
            assert_eq!(c.max_invalid_streak, 3);
        }
    }
}

// Harness consistency --------------------------------------------------------

#[derive(Clone, Copy)]
enum Plan {
    Correct,
    Wrong,
    StrayCorrect,
    StrayWrong,
    Silent,
}

fn plan(i: usize) -> Plan {
    match i {
        0..=5 | 17..=19 => Plan::Correct,
        6..=8 => Plan::Wrong,
        9..=12 => Plan::StrayCorrect,
        13..=14 => Plan::StrayWrong,
        _ => Plan::Silent,
    }
}

fn responses(p: Plan) -> &'static [&'static str] {
    match p {
        Plan::Correct => &["Action: 0", "Action: -2\nAnswer: (A)"],
        Plan::Wrong => &["Action: 0", "Action: -2\nAnswer: (B)"],
        Plan::StrayCorrect => &["Action: 0", "Action: -1", "Action: 1", "Action: -2\nAnswer: (A)"],
        Plan::StrayWrong => &["Action: 0", "Action: -1", "Action: 1", "Action: -2\nAnswer: (C)"],
        Plan::Silent => &["no", "no", "no"],
    }
}

fn criterion_10() {
    // Odd examples are long (40 tokens), even ones short (30), both two
    // segments of at most 20 tokens.
    let data: Vec<Example> = (0..20)
        .map(|i| {
            let context = vec![format!("e{i}"); if i % 2 == 1 { 40 } else { 30 }].join(" ");
            Example {
                id: format!("ex{i:02}"),
                context_tokens: count_tokens(&context),
                context,
                query: format!("Question ex{i:02}?"),
                options: Some(golden_options()),
                gold: "A".into(),
            }
        })
        .collect();
    let cursors: Mutex<BTreeMap<usize, usize>> = Mutex::default();
    let backend = FnBackend(move |req: &CompletionRequest| {
        if req.tag.starts_with("summarize") {
            return Ok::<_, BackendError>("part".into());
        }
        let at = req.prompt.find("Question ex").expect("query in prompt") + "Question ex".len();
        let i: usize = req.prompt[at..at + 2].parse().unwrap();
        let mut cursors = cursors.lock().unwrap();
        let k = cursors.entry(i).or_default();
        let reply = responses(plan(i))[*k];
        *k += 1;
        Ok(reply.to_string())
    });
    let c = client(backend, 4096);
    let config = Config {
        segment_size: 20,
        max_fanout: 4,
        long_threshold: 30,
        parallelism: 4,
        ..Config::default()
    };
    let report = evaluate(Method::MemWalker, &data, &c, &config, None);
    assert_eq!(report.error_count, 0, "{:?}", report.per_example.iter().find_map(|r| r.error.clone()));
    assert_eq!(report.n, 20);
    // Correct: 0-5, 9-12, 17-19. Strayed: 9-14, of which 9-12 recover.
    assert_eq!(report.accuracy, 13.0 / 20.0);
    assert_eq!(report.stray_ratio, 6.0 / 20.0);
    assert_eq!(report.recovery_rate, Some(4.0 / 6.0));
    assert_eq!(report.no_answer_count, 2);
    // Long (odd) correct: 1, 3, 5, 9, 11, 17, 19. Short: 0, 2, 4, 10, 12, 18.
    let long = &report.per_bucket[&Bucket::Long];
    let short = &report.per_bucket[&Bucket::Short];
    assert_eq!((long.n, long.correct, long.accuracy), (10, 7, Some(0.7)));
    assert_eq!((short.n, short.correct, short.accuracy), (10, 6, Some(0.6)));
    let recomposed = (long.n as f64 * long.accuracy.unwrap() + short.n as f64 * short.accuracy.unwrap()) / 20.0;
    assert!((recomposed - report.accuracy).abs() < 1e-12);
}

fn main() {
    if std::env::var_os("MEMWALKER_BLESS").is_some() {
        bless_golden();
        println!("golden fixtures rewritten in {}", fixtures().display());
    }
    // Keep assertion messages out of the way of the summary lines.
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, fn()); 10] = [
        ("golden trajectory and transcript", criterion_1),
        ("three-strikes rule", criterion_2),
        ("tree construction properties", criterion_3),
        ("prompt budget safety", criterion_4),
        ("token accounting", criterion_5),
        ("working memory", criterion_6),
        ("baselines", criterion_7),
        ("parser corpus", criterion_8),
        ("defaults parity", criterion_9),
        ("harness consistency", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS criterion {}: {name} ({secs:.2}s)", i + 1),
            Err(e) => {
                failed += 1;
                let message = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {}: {name} ({secs:.2}s): {message}", i + 1);
            }
        }
    }
    panic::set_hook(default_hook);
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
