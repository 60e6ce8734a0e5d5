//! Point-cloud geometry: sampling hierarchies, neighbor search, and the
//! resampling operators that move features between resolutions.

mod cloud;
mod hierarchy;
mod knn;
mod sampling;

pub use cloud::{PointCloud, Point3};
pub use hierarchy::{
    build_hierarchy, downsample_gather, propagate_labels, upsample_nearest, HierarchyRow,
    SamplingHierarchy, DEFAULT_RATIOS,
};
pub use knn::{knn, knn_brute_force, knn_with_threads, KnnTable};
pub use sampling::random_subsample;
