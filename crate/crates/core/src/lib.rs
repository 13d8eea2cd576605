// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod geometry;
pub mod grid;
pub mod local_ogm;
pub mod localization;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod sim;
pub mod store;
pub mod traversability;

pub use error::{Error, Result};
pub use geometry::{
    build_range_image, enumerate_sectors, transform_points, Point3, PointCloudFrame, Pose, RangeImage, SectorWindow,
};
pub use par::Execution;
