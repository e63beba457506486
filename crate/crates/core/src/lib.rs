//! Foundation model for multi-attribute interaction sequences.
//!
//! Events are fused into composite tokens, entities are embedded by a gated
//! mix of learned IDs and metadata-synthesized vectors, and a sliding-window
//! transformer is trained with autoregressive, masked-event and
//! masked-attribute objectives. Everything runs on a small reverse-mode
//! autodiff core generic over `f32`/`f64`.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod scalar;
pub mod schema;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use backbone::{AttentionMode, AttentionPattern, BackboneConfig, SeqLayout};
pub use dataset::Dataset;
pub use error::{Result, UifmError};
pub use hybrid::{EmbeddingMode, EntityCatalog, EntityMetadata, HybridConfig};
pub use model::{Model, ModelConfig, ModelSpec};
pub use numeric::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
pub use objectives::{LossBundle, MaskPlan, ObjectiveConfig};
pub use scalar::{Precision, Scalar};
pub use schema::{Event, EventSchema, Session, MASK, RESERVED, UNK};
pub use tokenizer::TokenizerConfig;
pub use trainer::TrainConfig;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
