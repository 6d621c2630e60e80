//! Sub-bit spiking convolutions.
//!
//! Kernels are replaced by `eta`-bit indices into a shared binary codebook,
//! assigned with outlier-aware scaling, packed into `.s2nn` files and run by a
//! popcount engine that reuses codeword products across output channels.
//! The guide under `book/` walks through each module; its snippets run as
//! doc-tests.

pub mod binarize;
pub mod codebook;
pub mod costmodel;
pub mod distill;
pub mod engine;
pub mod error;
pub mod io;
pub mod neuron;
pub mod osquant;
pub mod pack;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/neurons.md")]
    mod neurons {}
    #[doc = include_str!("../../../book/src/codebooks.md")]
    mod codebooks {}
    #[doc = include_str!("../../../book/src/outliers.md")]
    mod outliers {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/costs.md")]
    mod costs {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
