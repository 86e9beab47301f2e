//! Feature-gradient channel pruning for small CNNs.
//!
//! The pipeline: train a network, compute per-channel per-class
//! gradient-weighted activation heatmaps at every prunable convolution,
//! aggregate channel support across all classes, keep the top-k channels
//! per layer, rebuild the network with exact weight transfer, fine-tune,
//! and report FLOPs/parameter/accuracy deltas.
//!
//! Modules:
//! - [`tensor`], [`tape`], [`gemm`], [`kernels`]: dense tensors and
//!   reverse-mode autodiff with interior-gradient capture;
//! - [`layers`], [`model`], [`archs`]: layer specs, execution, concrete
//!   architectures;
//! - [`data`]: IDX / CIFAR-10 loaders, synthetic generators, batching;
//! - [`cam`]: Grad-CAM, Grad-CAM++, Score-CAM and per-channel heatmaps;
//! - [`select`]: importance accumulation, ranking, top-k and baselines;
//! - [`prune`]: dependency propagation and model surgery;
//! - [`train`], [`metrics`], [`report`]: SGD, evaluation, FLOPs/params,
//!   prune reports.

pub mod error;
pub mod gemm;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{FgpError, Result};
pub use tensor::{Scalar, Tensor};
