//! Small reverse-mode autodiff engine on `f64` matrices, with the layers the
//! three networks are built from.

pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{
    attend, dropout_sample, log_spaced, AttentionBlock, Ctx, DropoutMasks, DropoutSpec, Edges, FourierEmbedding, Gru,
    LayerNorm, Linear, Mlp, DEFAULT_BANDS,
};
pub use optim::{AdamConfig, AdamW};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Input(String),
}
