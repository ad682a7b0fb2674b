pub mod adaptive;
pub mod bench;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod filtration;
pub mod kernels;
pub mod kmeans;
pub mod leafgraph;
pub mod lut;
pub mod pq;
pub mod prunelab;
pub mod synth;

pub use dataset::{GroundTruth, Metric, Neighbor, VectorSet};
pub use engine::{build_index, load_index, save_index, Index, IndexParams, SearchRequest, SearchResult};
pub use error::{Error, Result};
