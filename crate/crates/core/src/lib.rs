//! Bi-level vision-language graph matching for text-guided lesion
//! segmentation.
//!
//! Visual features pooled from lesion masks and text features produced from
//! class and severity prompts are each turned into a graph with learned soft
//! edges. A GCN layer embeds the edge structure into the nodes, and an
//! affinity/normalization/Sinkhorn stage predicts a soft correspondence
//! between the two graphs. Cross-entropy (or L1) against the ground-truth
//! correspondence plus a structural consistency penalty train the encoders
//! on ground-truth masks and, alternately, the segmenter on its own soft
//! predictions.
//!
//! Everything runs on a small dense-matrix kernel with reverse-mode
//! derivatives ([`diffnum`]); synthetic lesion data ([`synthdata`]) stands in
//! for real fundus images.

pub mod diffnum;
mod error;
pub mod features;
pub mod gcn;
pub mod graphs;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod prompts;
pub mod synthdata;

pub use diffnum::DenseMatrix;
pub use error::{Error, Result, Shape};
