//! Bitemporal graph-interaction network (BGINet) for binary change detection
//! in co-registered image pairs.
//!
//! The pipeline is a weight-shared residual encoder, a graph branch that
//! soft-clusters each phase's features into K vertices
//! ([`projection`]), exchanges information between the two graphs
//! ([`interaction`]) and maps the result back to pixels ([`head`]), and a
//! 1×1 change head on the absolute feature difference. All layers carry
//! hand-written backward passes so the model trains without an autodiff
//! framework; [`verify`] checks them against finite differences and
//! scalar-loop oracles.

pub mod data;
pub mod encoder;
pub mod error;
pub mod head;
pub mod interaction;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod projection;
mod scalar;
pub mod train;
pub mod verify;

pub use encoder::{encode, encode_pair, Encoder, EncoderConfig, FeatureMap};
pub use error::{Error, Result};
pub use head::{change_head, reproject, ChangeHead, ChangeMap};
pub use interaction::{
    cross_message, inter_affinity, interact, intra_gcn, qkv_transform, unify_queries, InterAffinity,
    InteractionParams, Phase,
};
pub use loss::{dice_loss, focal_loss, total_loss, LossConfig};
pub use metrics::{confusion, precision_recall_f1, ConfusionCounts, Scores};
pub use model::{bginet_forward, BgiNet, ModelConfig};
pub use nn::HasParams;
pub use projection::{affinity, encode_vertices, project, soft_assign, GraphEmbedding, ProjectionParams};
pub use scalar::Scalar;
