//! Consistency scoring for sampled LLM responses.
//!
//! Three families of scores are computed for the same prompts and compared:
//!
//! - human ratings of response pairs, aggregated by trimmed mean
//!   ([`similarity::aggregate_human`]);
//! - sampling-based similarity metrics (BLEU, ROUGE-L natively, embedding
//!   scores and entailment ingested from files) and semantic entropy;
//! - a linear ensemble over 16 token-level uncertainty features that needs
//!   only a single generation per response ([`ensemble`]).
//!
//! Pairwise similarities become response-level and prompt-level consistency
//! through [`consistency`], and [`evaluation::compare_levels`] measures how
//! well each automated score tracks the human one.

pub mod cli;
pub mod consistency;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod semantic_entropy;
pub mod similarity;
pub mod trace;

pub use error::{Error, Result};
