//! Few-shot machine unlearning by model inversion.
//!
//! Given a trained classifier and a handful of examples of the behavior to
//! erase, the pipeline (i) trains a conditional generator against the frozen
//! classifier to approximate its inaccessible training data, (ii) filters the
//! generated samples for candidates that resemble the target examples,
//! (iii) relabels those candidates away from the target classes, and
//! (iv) retrains the classifier on the relabeled proxy set.
//!
//! Stages live in their own modules ([`data`], [`model`], [`inversion`],
//! [`filtration`], [`relearn`], [`eval`]) on top of a small f64 autodiff
//! engine ([`graph`], [`nn`]). [`pipeline`] wires whole scenarios together.

pub mod data;
pub mod error;
pub mod eval;
pub mod filtration;
pub mod graph;
pub mod inversion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod relearn;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
