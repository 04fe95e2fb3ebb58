//! Self-correcting information extraction: an extract, prune, detect and
//! feedback loop over NER, RE and EE tasks, with scoring and training-data
//! construction for the detectors.

pub mod backends;
pub mod config;
pub mod correction;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod jsonl;
pub mod mbsc;
pub mod model;
pub mod parser;
pub mod prompt;

pub use backends::BackendError;
