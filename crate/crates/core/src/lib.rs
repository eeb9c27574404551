//! Signature-guided retrieval over long documents.

pub mod agent;
pub mod embeddings;
pub mod eval;
pub mod error;
pub mod index;
pub mod llm;
pub mod prompts;
pub mod registry;
pub mod retrieval;
pub mod signature;

pub use error::{Error, Result};
