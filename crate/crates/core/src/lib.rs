//! Matryoshka speaker embeddings at desk scale.
//!
//! Trains a small frame-level encoder whose embedding prefixes are each
//! discriminative (one margin-softmax head per prefix), measures
//! verification EER at every prefix length, and searches a flat vector
//! store at any prefix dimension.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod math;
pub mod model;
pub mod store;

pub use error::{MvecError, Result};
