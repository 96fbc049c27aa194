//! Streaming KV-cache compression.
//!
//! A [`ZeroMergeCache`] splits a fixed token budget into a context segment
//! (highest decayed attention scores), a residual segment (running-mean slots
//! that absorb evicted tokens) and a proximity segment (most recent tokens).
//! Attention over the cache adds `alpha * ln(fusion_count)` to each logit so
//! merged slots regain the mass of the tokens they absorbed.
//!
//! The crate also ships eviction baselines, synthetic workloads with a binary
//! trace format, and a harness comparing any policy against full attention.

pub mod attention;
pub mod baselines;
pub mod cache;
pub mod cli;
pub mod error;
pub mod harness;
pub mod scoring;
pub mod types;
pub mod workload;

pub use attention::{compensated_attention, full_attention, stable_softmax, AttentionResult};
pub use baselines::{CachePolicy, PolicyKind};
pub use cache::{merge_into_slot, select_merge_slot, MultiHeadCache, ZeroMergeCache};
pub use error::{Error, Result};
pub use harness::{attention_error, run_policy, verify_theorem1, MetricsReport};
pub use scoring::{closed_form_score, ScoreTracker};
pub use types::{Budgets, CacheEntry, EntryId, RunConfig, Vector};
pub use workload::{gen_gaussian, gen_heavy_hitter, read_trace, write_trace, StepRecord, Trace};
