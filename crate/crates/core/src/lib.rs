//! Attention-distribution alignment laboratory.
//!
//! The crate builds a small, fully deterministic multimodal decoder and the
//! instruments needed to study how it attends:
//!
//! * [`model`]: the decoder, its KV cache and per-layer attention hooks.
//! * [`align`]: semantic-head categorization and the two-stage alignment
//!   that pulls weak heads toward strong ones.
//! * [`flow`]: attention rollout, semantic-attention share, peak statistics
//!   and the vision-masking probe.
//! * [`decode`]: sampling, Jensen-Shannon divergence and cross-image
//!   contrastive decoding with a divergence-adaptive weight.
//! * [`metrics`]: CHAIR, AMBER and CAPTURE style caption metrics.
//!
//! The `book/` directory next to the workspace explains each piece in prose;
//! its code listings are compiled and run as doctests of this crate.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod decode;
pub mod dist;
mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod report;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
