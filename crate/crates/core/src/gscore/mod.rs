//! Splat and point-cloud types, sampling, interpolation and batching.

mod batch;
mod geometry;
mod types;

pub use batch::{make_batch, BatchedGaussians};
pub use geometry::{chamfer_distance, fps_downsample, idw_interpolate, idw_weights, knn, sq_dist, Point, IDW_EPS};
pub use types::{
    canonical_quaternion, extract_struct, AffordanceMask, GaussianObject, GaussianStruct, PointCloudObject, QUAT_RENORM_TOL,
    STRUCT_COLUMNS, STRUCT_DIM,
};
