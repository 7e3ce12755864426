//! Cascaded hierarchical classification over a fixed five-rank taxonomy
//! (class, order, family, genus, species).
//!
//! The crate covers the whole pipeline: taxonomy cleaning and masks
//! ([`taxonomy`]), a small dense-tensor and backprop core ([`numerics`]),
//! cascaded per-level heads with masked softmax ([`model`]), multi-level focal
//! loss training ([`training`]), hierarchical decoders ([`inference`]),
//! taxonomic error metrics ([`evaluation`]) and datasets ([`data`]).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod numerics;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
pub use taxonomy::{LabelPath, Level, TaxonomyTree};
