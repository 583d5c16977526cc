//! Geometric superpoints (ground separation + density clustering) and visual
//! superpoints (2D mask proposals lifted onto the point cloud).

mod cluster;
mod ground;
mod visual;

pub use cluster::{cluster_nonground, dbscan_labels, ClusterParams, Clusterer, Dbscan};
pub use ground::{segment_ground, GroundPlane, RansacParams};
pub use visual::{lift_visual_masks, Proposal2d, VisualSuperpoint, VisualSuperpoints};

use crate::error::Result;
use crate::frame::PointCloud;
use crate::mask::PointMask;

/// Ground mask plus pairwise-disjoint non-ground clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricSuperpoints {
    pub ground: PointMask,
    pub clusters: Vec<PointMask>,
}

impl GeometricSuperpoints {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(PointMask::count).collect()
    }

    /// Candidate superpoints for growing stuff masks: every cluster followed by
    /// the ground region as one implicit superpoint.
    pub fn candidates(&self) -> Vec<&PointMask> {
        let mut out: Vec<&PointMask> = self.clusters.iter().collect();
        if !self.ground.is_empty() {
            out.push(&self.ground);
        }
        out
    }
}

/// Ground separation followed by clustering of the remaining points.
pub fn extract_geometric_superpoints(
    cloud: &PointCloud,
    ransac: &RansacParams,
    clusterer: &impl Clusterer,
) -> Result<GeometricSuperpoints> {
    let plane = segment_ground(cloud, ransac)?;
    let mut nonground = PointMask::full(cloud.len());
    nonground.subtract(&plane.ground)?;
    if nonground.is_empty() {
        return Ok(GeometricSuperpoints {
            ground: plane.ground,
            clusters: Vec::new(),
        });
    }
    let clusters = clusterer.cluster(cloud.positions(), &nonground)?;
    Ok(GeometricSuperpoints {
        ground: plane.ground,
        clusters,
    })
}
