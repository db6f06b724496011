//! Speaker attribution for quotations in literary text.
//!
//! A quotation and its surrounding context are verbalized by a prompt
//! template into a source sequence; an encoder-decoder model either
//! generates the speaker name directly or scores every candidate speaker by
//! the mean per-step probability of its rendered target, and the best-scoring
//! candidate wins.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`]: data model, ingestion adapters, minor-speaker filtering,
//!   split protocols and statistics
//! * [`templates`]: source/target verbalization and the template catalog
//! * [`backend`]: the sequence-to-sequence contract, a table-driven oracle and
//!   a small trainable attention model
//! * [`inference`]: classification by generation and direct generation
//! * [`training`]: training-pair construction and the fine-tuning loop
//! * [`evaluation`]: accuracy by quote type, fold aggregation, top-k and
//!   lenient matching
//! * [`baselines`]: an encoder classifier and a zero-shot LLM client
//! * [`viz`]: t-SNE of speaker-name embeddings

pub mod backend;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod normalize;
pub mod synthetic;
pub mod templates;
pub mod training;
pub mod viz;

mod hash;

pub use error::{Error, Result};
pub use hash::{sha256_file, sha256_hex};
