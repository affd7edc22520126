//! Learning side of the planner: the autodiff engine, the trajectory policy,
//! twin critics, the dropout-Bayesian reward and the training loop.

pub mod features;
pub mod nn;
pub mod pipeline;
pub mod config;
pub mod criticformer;
pub mod encoder;
pub mod motionformer;
pub mod planners;
pub mod replay;
pub mod reward;
pub mod stages;
pub mod trainer;

pub use nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error("{0}")]
    Input(String),
    #[error("non-finite {what}")]
    NonFinite { what: String, dump: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
