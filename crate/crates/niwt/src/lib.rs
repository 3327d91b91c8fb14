//! Neuron importance-aware weight transfer.
//!
//! Pipeline: train a small convolutional classifier on seen classes, extract
//! class-conditional neuron importances at a chosen layer, fit a linear map
//! from class knowledge (attributes) to those importances, then synthesize
//! classifier weights for unseen classes by optimizing a gradient-of-gradient
//! objective. The inverse map drives textual explanations and neuron naming;
//! Grad-CAM drives visual ones.

/// Tensor buffers are allocated and dropped once per optimizer iteration;
/// mimalloc keeps those pages pooled instead of returning them to the OS.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod array;
pub mod autodiff;
pub mod cli;
pub mod container;
pub mod explain;
pub mod importance;
pub mod knowmap;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synthbench;
pub mod transfer;

pub use array::Array;
pub use rng::SplitMix64;
