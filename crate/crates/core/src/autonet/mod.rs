//! Minimal reverse-mode tensor engine and the denoiser's networks.

pub mod gradcheck;
mod graph;
pub mod nets;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{check_graph_op, grad_check, GradReport};
pub use graph::{Gradients, Graph, NormUpdate, Var};
pub use nets::{
    embed_net_graph, embed_net_init, noise_net_forward, noise_net_graph, noise_net_init,
    prior_net_forward, prior_net_graph, prior_net_init, NetConfig, EMBED_FEATURES,
    NOISE_OUTPUT_SCALE,
};
pub use ops::NormMode;
pub use params::{adam_step, Adam, ParamStore};
pub use tensor::Tensor;
