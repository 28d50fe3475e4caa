//! NIGP-Tree: hierarchical multi-class classification with sparse Gaussian
//! process binary classifiers at the internal nodes of a class tree.
//!
//! Each node is trained with Pólya-Gamma augmented variational inference and
//! can inflate its predictive variance to account for noise on the inputs.

pub mod cli;
pub mod data;
pub mod denoise;
pub mod error;
pub mod kernels;
pub mod kmeans;
mod linalg;
pub mod metrics;
pub mod oracle;
pub mod pg_node;
pub mod tree;

pub use data::{BlobSpec, DataFormat, FeatureDataset};
pub use denoise::{DenoiseMethod, DenoiseResult};
pub use error::{Error, Result};
pub use kernels::{Kernel, KernelFamily, KernelSpec};
pub use metrics::Metrics;
pub use pg_node::{LatentPrediction, NoiseModel, PGNode};
pub use tree::{ClassTree, TrainConfig, TrainedModel};
