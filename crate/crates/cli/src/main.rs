use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use memwalker::baselines::{baseline_answer, Method};
use memwalker::eval::{self, Bucket, TreeCache};
use memwalker::llm::{Backend, HttpBackend, ScriptedBackend, TraceLog};
use memwalker::navigator::{read_trajectory, render_transcript, write_trajectory, Navigator, Outcome};
use memwalker::tokenize::default_tokenizer;
use memwalker::{Config, Error, LlmClient, MemoryTree, Task, TreeBuilder};

#[derive(Parser)]
#[command(name = "memwalker", version, about = "Answer questions over long documents by walking a summary tree")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file with config overrides
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the shipped settings of this task
    #[arg(long, global = true)]
    task: Option<Task>,
    /// `http` (endpoint from MEMWALKER_API_BASE) or `scripted:<file>`
    #[arg(long, global = true, default_value = "http")]
    backend: String,
    #[arg(long, global = true)]
    no_reasoning: bool,
    /// Keep the original prompt wording, typos included
    #[arg(long, global = true, overrides_with = "no_faithful_prompts")]
    faithful_prompts: bool,
    #[arg(long, global = true)]
    no_faithful_prompts: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Append every completion to this JSONL file
    #[arg(long, global = true)]
    trace_log: Option<PathBuf>,
    /// Directory for cached trees
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the summary tree for a document
    Build {
        document: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question from a tree file or a document
    Ask {
        input: PathBuf,
        #[arg(long)]
        query: String,
        /// Comma-separated answer choices, labeled (A), (B), ...
        #[arg(long, value_delimiter = ',')]
        options: Option<Vec<String>>,
        #[arg(long, default_value = "memwalker")]
        method: Method,
        /// Where to write the navigation trajectory
        #[arg(long, default_value = "trajectory.jsonl")]
        trajectory: PathBuf,
    },
    /// Evaluate a method on a JSONL dataset
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
        /// Only examples above the task's length threshold
        #[arg(long)]
        long_only: bool,
        /// Write the full report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate the tree reader over a grid of segment sizes and fanouts
    Sweep {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        fanouts: Vec<usize>,
        /// CSV output; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a readable transcript of a trajectory file
    Trace { trajectory: PathBuf },
}

impl Global {
    fn config(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                Config::layered(self.task, &text)?
            }
            None => Config::for_task(self.task.unwrap_or(Task::Quality)),
        };
        if self.no_reasoning {
            config.reasoning_enabled = false;
        }
        if self.faithful_prompts {
            config.faithful_prompts = true;
        }
        if self.no_faithful_prompts {
            config.faithful_prompts = false;
        }
        if self.seed.is_some() {
            config.seed = self.seed;
        }
        config.validate(default_tokenizer().as_ref())?;
        Ok(config)
    }

    fn client(&self, config: &Config) -> Result<LlmClient> {
        let backend: Arc<dyn Backend> = match self.backend.as_str() {
            "http" => Arc::new(HttpBackend::from_env(config).map_err(Error::from)?),
            other => match other.strip_prefix("scripted:") {
                Some(path) => Arc::new(ScriptedBackend::load(Path::new(path))?),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "unknown backend {other:?}; use http or scripted:<file>"
                    ))
                    .into())
                }
            },
        };
        let mut client = LlmClient::for_config(backend, default_tokenizer(), config);
        if let Some(path) = &self.trace_log {
            client = client.with_trace(Arc::new(TraceLog::to_file(path)?));
        }
        Ok(client)
    }

    fn cache(&self) -> Result<Option<TreeCache>> {
        Ok(self.cache_dir.as_ref().map(TreeCache::new).transpose()?)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| io_error(path, e))?)
}

fn percent(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Trace { trajectory } => {
            print!("{}", render_transcript(&read_trajectory(&trajectory)?));
        }
        Command::Build { document, out } => {
            let config = g.config()?;
            let client = g.client(&config)?;
            let text = read(&document)?;
            let partial = memwalker::builder::checkpoint_path(&out);
            let builder = TreeBuilder::new(&client, &config)?.with_checkpoint(&partial);
            let tree = builder.build(&text)?;
            tree.save(&out)?;
            let _ = std::fs::remove_file(&partial);
            let stats = builder.stats();
            println!(
                "{}: {} segments, {} nodes, height {}, {} completions",
                out.display(),
                tree.leaf_count(),
                tree.node_count(),
                tree.height(),
                stats.llm_calls
            );
        }
        Command::Ask {
            input,
            query,
            options,
            method,
            trajectory,
        } => {
            let config = g.config()?;
            let client = g.client(&config)?;
            let text = read(&input)?;
            let options = options.as_deref();
            let tree = MemoryTree::from_json(&text).ok();
            if method != Method::MemWalker {
                let Some(document) = tree.is_none().then_some(&text) else {
                    return Err(Error::InvalidInput(format!("{method} needs a document, not a tree file")).into());
                };
                let r = baseline_answer(method, document, &query, options, &client, &config)?;
                println!("{}", r.outcome.answer().unwrap_or("no answer"));
                println!("calls: {}, context tokens: {}", r.calls, r.context_tokens);
                return Ok(());
            }
            let tree = match tree {
                Some(t) => t,
                None => match g.cache()? {
                    Some(cache) => {
                        let id = input.file_stem().map_or("doc".into(), |s| s.to_string_lossy().into_owned());
                        cache.get_or_build(&id, &text, &config, &client)?
                    }
                    None => TreeBuilder::new(&client, &config)?.build(&text)?,
                },
            };
            let navigator = Navigator::new(&tree, &client, &config)?;
            let result = match navigator.navigate(&query, options) {
                Ok(r) => r,
                Err(e) => {
                    write_trajectory(&trajectory, &e.trajectory)?;
                    return Err(e.source.into());
                }
            };
            write_trajectory(&trajectory, &result.trajectory)?;
            match &result.outcome {
                Outcome::Answered { answer } => println!("{answer}"),
                Outcome::NoAnswer { .. } => println!("no answer"),
            }
            let m = &result.metrics;
            println!(
                "steps: {}, strayed: {}, tokens read: {} ({} of document)",
                m.steps,
                if m.strayed { "yes" } else { "no" },
                m.tokens_processed,
                percent(m.fraction_of_original)
            );
        }
        Command::Eval {
            dataset,
            method,
            long_only,
            report,
        } => {
            let config = g.config()?;
            let client = g.client(&config)?;
            let mut examples = eval::load_dataset(&dataset, client.tokenizer())?;
            if long_only {
                examples.retain(|e| Bucket::of(e.context_tokens, config.long_threshold) == Bucket::Long);
            }
            let cache = g.cache()?;
            let r = eval::evaluate(method, &examples, &client, &config, cache.as_ref());
            print!("{}", r.to_table());
            if let Some(path) = report {
                std::fs::write(&path, r.to_json()).map_err(|e| io_error(&path, e))?;
            }
            if r.error_count > 0 {
                eprintln!("{} of {} examples failed; see the report for messages", r.error_count, r.n);
                if let Some(e) = r.per_example.iter().find_map(|row| row.error.as_deref()) {
                    eprintln!("first failure: {e}");
                }
            }
        }
        Command::Sweep {
            dataset,
            sizes,
            fanouts,
            out,
        } => {
            let config = g.config()?;
            let client = g.client(&config)?;
            let examples = eval::load_dataset(&dataset, client.tokenizer())?;
            let cache = g.cache()?;
            let cells = eval::sweep_tree_configs(&examples, &sizes, &fanouts, &client, &config, cache.as_ref())?;
            match out {
                Some(path) => eval::write_sweep_csv(&path, &cells)?,
                None => {
                    println!("segment_size,max_fanout,n,accuracy,mean_height,mean_node_count,errors");
                    for c in &cells {
                        println!(
                            "{},{},{},{},{},{},{}",
                            c.segment_size, c.max_fanout, c.n, c.accuracy, c.mean_height, c.mean_node_count, c.errors
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

/// 2 for bad arguments or settings, 3 for file problems, 4 for the endpoint.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_endpoint() => 4,
        Some(
            Error::Io { .. }
            | Error::MalformedRecord { .. }
            | Error::StaleCache { .. }
            | Error::Json(_)
            | Error::Toml(_)
            | Error::Csv(_)
            | Error::Template(_),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MEMWALKER_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
