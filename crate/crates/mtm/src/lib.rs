//! Multi-target text matching for high-quality comment identification.
//!
//! A comment is classified as high or low quality by matching it against
//! three targets from its news context — the title, the abstract and the
//! surrounding comments — plus a representation of the comment itself:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff engine
//!   with a finite-difference gradient checker,
//! - [`corpus`]: JSONL ingestion, quality labeling, length filtering,
//!   vocabulary, instance assembly, splits and a synthetic generator,
//! - [`encoder`]: embeddings, a one-layer Bi-LSTM and overlapping
//!   mean-pooling,
//! - [`matcher`]: bidirectional cosine attention and multi-perspective
//!   matching against each target,
//! - [`aggregator`]: per-target aggregation Bi-LSTM, representation
//!   combination and the classification head,
//! - [`model`]: parameter initialization, the full forward pass and
//!   checkpoint serialization,
//! - [`trainer`]: Adam optimization, metrics and sweep harness.

pub mod aggregator;
pub mod corpus;
pub mod encoder;
pub mod matcher;
pub mod model;
pub mod tensor;
pub mod trainer;
