//! Transformer sequential recommender trained with two contrastive
//! auxiliaries whose positive samples come from semantic retrieval:
//!
//! * inter-user: a learnable attention synthesizer mixes the representations
//!   of semantically similar users into a positive for each user;
//! * intra-user: two views of a sequence are made by swapping items for
//!   semantically similar ones.
//!
//! Semantic embeddings come from a pluggable summarizer + text-embedding
//! pipeline and are frozen before training. Inference uses only the
//! backbone.

pub mod autograd;
pub mod config;
pub mod contrastive;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod provenance;
pub mod retrieval;
pub mod rng;
pub mod semantic;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Matrix;
