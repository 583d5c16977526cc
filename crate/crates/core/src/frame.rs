//! Point clouds and multimodal frames.

use crate::camera::{CameraImage, Calibration};
use crate::error::{shape_err, Error, Result};
use crate::panoptic::PanopticLabeling;

/// LiDAR points in the sensor frame with `channels` feature values per point.
/// Feature channel 0 is intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: Vec<f64>,
    channels: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: Vec<f64>, channels: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if channels == 0 {
            return Err(shape_err("point clouds need at least one feature channel"));
        }
        if features.len() != positions.len() * channels {
            return Err(shape_err(format!(
                "{} feature values for {} points x {} channels",
                features.len(),
                positions.len(),
                channels
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Numeric(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            positions,
            features,
            channels,
        })
    }

    /// Cloud with a single intensity channel.
    pub fn with_intensity(positions: Vec<[f64; 3]>, intensity: Vec<f64>) -> Result<Self> {
        PointCloud::new(positions, intensity, 1)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn intensity(&self, i: usize) -> f64 {
        self.features[i * self.channels]
    }

    /// Sets every feature channel of point `i` to zero; its position is untouched.
    pub fn zero_features(&mut self, i: usize) {
        self.features[i * self.channels..(i + 1) * self.channels]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    /// Cloud made of the points listed in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Result<PointCloud> {
        let positions = keep.iter().map(|&i| self.positions[i]).collect();
        let features = keep
            .iter()
            .flat_map(|&i| self.feature_row(i).iter().copied())
            .collect();
        PointCloud::new(positions, features, self.channels)
    }
}

/// One multimodal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub image: CameraImage,
    pub calib: Calibration,
    pub labels: Option<PanopticLabeling>,
}

impl Frame {
    pub fn new(
        cloud: PointCloud,
        image: CameraImage,
        calib: Calibration,
        labels: Option<PanopticLabeling>,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != cloud.len() {
                return Err(shape_err(format!(
                    "{} labels for {} points",
                    l.len(),
                    cloud.len()
                )));
            }
        }
        Ok(Frame {
            cloud,
            image,
            calib,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn labels(&self) -> Result<&PanopticLabeling> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("frame carries no ground-truth labels".into()))
    }
}
