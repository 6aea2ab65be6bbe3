//! The pose network: shared per-antenna encoder, point-wise antenna fusion,
//! temporal/antenna attention pooling, joint LayerNorm and a Chebyshev graph
//! head with self-attention. Forward and backward passes are hand-written.

pub mod aggregate;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod head;
pub mod layers;
pub mod network;
pub mod params;

use thiserror::Error;

use crate::skeleton::GraphError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Aggregator, HeadKind, ModelConfig};
pub use network::{graph_head_param_count, ActivationTrace, Network};
pub use params::{Grads, ParamId, ParamKind, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} values, expected shape {expected:?}")]
    Shape { expected: Vec<usize>, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint digest {found} does not match {expected} (use --force to override)")]
    DigestMismatch { expected: String, found: String },
}
