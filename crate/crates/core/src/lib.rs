//! Large-receptive-field 1-D convolutional acoustic models, from scratch.
//!
//! The crate provides, in dependency order:
//!
//! - [`netgraph`]: declarative network specs (JSON document format,
//!   validation, parameter accounting, budget matching)
//! - [`layers`] / [`network`]: tensor kernels with hand-written adjoints and
//!   the graph executor with checkpointing
//! - [`architectures`]: builders for the standard, dilated, TDNN, recursive,
//!   and stacked-hourglass families
//! - [`rf`]: receptive-field calculus, closed forms, and independent
//!   structural/gradient probes
//! - [`acoustics`]: synthetic room impulse responses, reverb convolution,
//!   SNR/IS/CD quality measures, and log-mel features with CMVN
//! - [`corpus`]: a synthetic frame-labeled corpus generator plus reverberated
//!   copies
//! - [`trainer`]: Adam mini-batch training, evaluation, and gradient checks

pub mod acoustics;
pub mod architectures;
pub mod corpus;
pub mod layers;
pub mod netgraph;
pub mod network;
pub mod rf;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use netgraph::{Family, NetworkSpec};
pub use tensor::Tensor;
