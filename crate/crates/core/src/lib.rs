//! Appearance-based loop closure detection under a per-frame time budget.
//!
//! Images arrive as sets of feature descriptors. Each frame is quantized into a
//! bag-of-words signature over an incremental vocabulary, compared against the
//! locations of the working memory by a discrete Bayesian filter, and linked to
//! a past location when the new-place probability drops under a threshold.
//! When a frame takes longer than the budget, the least-viewed locations are
//! transferred to an on-disk long-term memory; neighbors of the best hypothesis
//! are brought back on later frames.

pub mod bayes;
pub mod config;
pub mod engine;
pub mod error;
pub mod graph;
pub mod ids;
pub mod ingest;
pub mod ltm;
pub mod management;
pub mod metrics;
pub mod report;
pub mod signature;
pub mod synth;
pub mod vocabulary;

pub use config::{Checks, EngineConfig, TimeSource};
pub use engine::{Engine, FrameOutcome};
pub use error::{Error, Result};
pub use ids::{LocationId, WordId};
pub use vocabulary::Descriptor;
