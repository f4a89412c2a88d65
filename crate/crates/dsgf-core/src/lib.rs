//! Schema-guided dialogue state tracking with a dynamic schema graph.
//!
//! The pipeline encodes dialogue utterances and natural-language schema
//! descriptions, reasons over the static slot-domain membership graph,
//! fuses dialogue context into the node embeddings, completes dialogue-aware
//! dynamic slot relations (co-reference, co-update, co-occurrence), and
//! decodes per-slot value spans over the dialogue context plus the candidate
//! value vocabulary. Training jointly optimizes span and relation losses with
//! teacher-forced gold relation graphs; inference consumes predicted ones.

pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph_net;
pub mod model;
pub mod nn;
pub mod par;
pub mod relations;
pub mod rng;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DsgfError, Result};
