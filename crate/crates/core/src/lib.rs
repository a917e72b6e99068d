//! Marking-level HD map construction from monocular ground-marking detections.
//!
//! Detected marking corners are inverse projected through each camera's IPM
//! homography, associated into a shared map through a quad-tree of marking
//! centers, and refined together with the camera extrinsics by a bundle
//! adjustment over pixel reprojection error. The refined extrinsics yield a
//! self-calibrated homography per camera.
//!
//! The stages are:
//!
//! 1. [`geometry`]: rigid transforms, pinhole projection and its Jacobians.
//! 2. [`ipm`]: homography application, DLT estimation, composition from a
//!    camera model, and the pixel region of interest.
//! 3. [`association`]: quad-tree index and frame-to-map marking matching.
//! 4. [`mapbuild`]: the naive averaging map and the incremental pipeline.
//! 5. [`optimize`]: Levenberg–Marquardt bundle adjustment with a Schur
//!    complement over the corner blocks.
//! 6. [`simulate`]: synthetic marking fields, trajectories and detections.
//! 7. [`metrics`]: corner RMSE and rasterized IoU against ground truth.
//! 8. [`baselines`]: the CNI / ENI / Opt / ONI comparison runs.
//!
//! Line-oriented text formats for all inputs and outputs live in [`formats`].
//!
//! With the default `parallel` feature, residual evaluation, rendering and
//! evaluation fan out over rayon; without it every path runs sequentially and
//! produces identical results.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod baselines;
pub mod formats;
pub mod geometry;
pub mod ipm;
pub mod mapbuild;
pub mod metrics;
pub mod optimize;
pub mod par;
pub mod simulate;

pub use geometry::{CameraModel, GroundPoint, Intrinsics, MapPoint, PixelPoint, RigidTransform};
pub use ipm::{Homography, PointPair, RegionOfInterest};
