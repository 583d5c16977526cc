//! Unsupervised domain adaptation for multimodal (LiDAR + camera) 3D panoptic
//! segmentation at desk scale.

pub mod amd;
pub mod camera;
pub mod error;
pub mod frame;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod panoptic;
pub mod pseudolabel;
pub mod superpoints;
pub mod synth;
pub mod trainer;
pub mod voxel;

pub use camera::{project_points, CameraImage, Calibration, Projection};
pub use error::{Error, Result};
pub use frame::{Frame, PointCloud};
pub use mask::{mask_iou, PointMask};
pub use panoptic::{decode_panoptic, encode_panoptic, ClassKind, ClassRegistry, PanopticLabeling};
pub use voxel::{CylindricalVoxelGrid, GridSpec, RadiusIndex, OUT_OF_RANGE};
