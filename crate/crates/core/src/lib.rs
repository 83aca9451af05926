//! Long-document question answering by building a summary tree over the
//! text and letting a language model walk it.
//!
//! [`builder`] turns a document into a [`MemoryTree`]; [`navigator`] answers a
//! query by descending through summaries to a segment, reverting when a
//! branch does not pay off. [`baselines`] and [`eval`] provide the comparison
//! readers and the accuracy harness.

pub mod baselines;
pub mod builder;
pub mod config;
pub mod error;
pub mod eval;
pub mod llm;
pub mod model;
pub mod navigator;
pub mod prompts;
pub mod tokenize;

pub use builder::{build_tree, TreeBuilder};
pub use config::{Config, Grouping, Sampling, Task};
pub use error::{Error, Result};
pub use llm::{Backend, LlmClient};
pub use model::{Action, MemoryTree, Segment, TreeNode};
pub use navigator::{navigate, NavigationResult, Navigator, Outcome};
