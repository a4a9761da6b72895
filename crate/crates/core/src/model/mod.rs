//! A small GLM-style transformer: one stack in which Part A attends
//! bidirectionally and Part B causally, with token, inter-position and
//! intra-position embeddings summed at the input and a tied output head.
//!
//! Gradients are hand-derived. Every public pass is generic over [`Scalar`]
//! so the same code runs in f32 for training and in f64 for gradient checks.

pub mod checkpoint;
mod forward;
mod ops;
mod optim;
mod params;
mod scalar;
mod session;

pub use forward::{
    backward, batch_gradients, batch_loss, example_nll, forward, infill_loss, logits_all, project, visible_prefix,
    Forward,
};
pub use optim::{schedule, AdamW, AdamWConfig};
pub use params::{
    init_model, Adapter, Entry, Layer, Linear, LoraConfig, ModelConfig, ModelParams, Norm, ParamClass, Role, Tensor,
    Trainable,
};
pub use scalar::{matmul, Op, Scalar};
pub use session::Session;

#[cfg(test)]
mod tests;
