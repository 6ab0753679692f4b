//! Building blocks for task-coherent pre-training data.
//!
//! The pipeline gathers corpus paragraphs that share an intrinsic task with a
//! contrastively trained retriever, packs each query paragraph together with
//! its neighbours into one pre-training instance, filters instances by how
//! much concatenation lowers a reference model's perplexity, trains small
//! language models on the mixed objective and evaluates them few-shot.
//!
//! Modules follow the data flow:
//!
//! - [`corpus`]: ingest, tokenize, split and merge paragraphs.
//! - [`encoder`]: hashed n-gram features and the contrastive task encoder.
//! - [`vecindex`]: exact and IVF maximum-inner-product search.
//! - [`retrieval`]: dense, BM25 and random neighbour strategies.
//! - [`constructor`]: instance packing, informativeness scoring, filtering.
//! - [`lm`]: scorers, the n-gram and feed-forward LMs, mixed training.
//! - [`eval`]: ranking classification, ROUGE-L, perplexity comparison.
//! - [`synth`]: a synthetic intrinsic-task world for end-to-end checks.

pub mod constructor;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod lm;
pub mod retrieval;
pub mod synth;
pub mod util;
pub mod vecindex;

pub use corpus::{Document, Paragraph, ParagraphStore, Tokenizer};
pub use encoder::EncoderModel;
pub use lm::{LmScorer, LogProb};
