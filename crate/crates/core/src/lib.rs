//! Dual attention networks for visual dialog: a history-attention module
//! (REFER) feeding a region-attention module (FIND), with candidate answers
//! ranked by dot product.
//!
//! The crate carries its own autodiff tape ([`tensor`]), a synthetic dialog
//! generator with planted pronoun references ([`dataset::synth`]), retrieval
//! metrics ([`metrics`]) and the training loop ([`train`]). The `dan` binary
//! wraps all of it.

pub mod ablate;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod find;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ablation.md")]
    mod ablation {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
}
