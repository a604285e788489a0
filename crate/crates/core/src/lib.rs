//! Attribution-based structured pruning.
//!
//! Components (conv filters, linear neurons, attention heads) are scored by
//! explaining a set of reference samples, ranked by their mean relevance, and
//! masked in order of increasing relevance. The quality of an attribution
//! setup is the mean top-1 accuracy over a schedule of pruning rates, which
//! [`search`] maximizes over rule composites.

pub mod attrib;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod graph;
pub mod lrp;
pub mod nnix;
pub mod prune;
pub mod report;
pub mod search;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
