//! Hierarchical graph neural module network.
//!
//! Three graph layers (visual, semantic, commonsense) are built from
//! annotation files; a learned controller runs a fixed number of soft
//! reasoning steps in which every neural module executes and their
//! attention outputs are averaged by predicted module weights. Everything
//! from the question encoder to the answer head is differentiated by the
//! small tape in [`autodiff`].

pub mod autodiff;
pub mod builder;
pub mod controller;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod io;
pub mod modules;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
