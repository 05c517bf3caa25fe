//! Sparse non-negative matrix (SNM) language models: skip-gram and n-gram
//! features, count accumulation, hashed-metafeature adjustment trained on
//! the Poisson loss, and evaluation.
//!
//! The crate is `no_std` with `alloc`; file formats, the command line and
//! multi-threaded training live in the `snm` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adjustment;
pub mod corpus;
pub mod counts;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod hash;
pub mod model;
pub mod training;

pub use adjustment::{MetafeatureConfig, TableLayout, WeightTable};
pub use corpus::{build_vocabulary, Sentence, Vocabulary, WordId};
pub use counts::{accumulate, CountStore, FeatureId};
pub use error::{Result, SnmError};
pub use evaluation::{interpolate, optimize_weights, perplexity, EvalReport, ProbabilityStream};
pub use features::{FeatureKey, Template, TemplateSet};
pub use model::{Probability, SnmModel};
pub use training::{train, EncodedEvents, TrainerConfig};
