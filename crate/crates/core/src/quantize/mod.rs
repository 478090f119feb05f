//! Kernel decomposition, per-segment codebook learning and assembly of
//! merged E-layers.

mod decompose;
mod io;
mod kmeans;
mod merged;
mod stats;

pub use decompose::{decompose_spatial, join_segments, segment_count, segment_depth, SpatialGroup};
pub use io::{load_merged, save_merged};
pub use kmeans::{derive_seed, kmeans, nearest, KMeansConfig, KMeansResult, RestartLog};
pub use merged::{
    build_merged, segment_vectors, ELayer, EMember, LayerParams, MemberGeometry, MergeParams,
    MergedModel, SegmentCodebook, TaskLayer, TaskModel,
};
pub use stats::{compression_stats, CompressionReport, LayerCompression, SizeTotals, BYTES_PER_PARAM};

