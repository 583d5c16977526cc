//! Camera image, LiDAR-to-camera calibration and point projection.

use crate::error::{shape_err, Error, Result};
use crate::frame::PointCloud;

pub const DEFAULT_WIDTH: usize = 640;
pub const DEFAULT_HEIGHT: usize = 360;

/// Row-major `height x width x 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraImage {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
}

impl CameraImage {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape_err("image dimensions must be positive"));
        }
        if rgb.len() != width * height * 3 {
            return Err(shape_err(format!(
                "{} channel values for a {width}x{height} image",
                rgb.len()
            )));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("image values must lie in [0, 1]".into()));
        }
        Ok(CameraImage { width, height, rgb })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        CameraImage { width, height, rgb }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                rgb.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        CameraImage { width, height, rgb }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.rgb
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    /// Writes a pixel; values are clamped into `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        for k in 0..3 {
            self.rgb[o + k] = c[k].clamp(0.0, 1.0);
        }
    }

    /// Grayscale luminance (Rec. 601 weights), row-major.
    pub fn luminance(&self) -> Vec<f32> {
        self.rgb
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }

    pub fn map_values(&mut self, mut f: impl FnMut(f32) -> f32) {
        for v in &mut self.rgb {
            *v = f(*v).clamp(0.0, 1.0);
        }
    }
}

/// Rigid LiDAR-to-camera transform plus pinhole intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    extrinsic: [[f64; 4]; 4],
    intrinsic: [[f64; 3]; 3],
}

impl Calibration {
    pub fn new(extrinsic: [[f64; 4]; 4], fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if extrinsic.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("extrinsic contains non-finite entries".into()));
        }
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| extrinsic[k][i] * extrinsic[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst >= 1e-9 {
            return Err(Error::Config(format!(
                "extrinsic rotation is not orthonormal (deviation {worst:e})"
            )));
        }
        if extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config("extrinsic last row must be [0, 0, 0, 1]".into()));
        }
        Ok(Calibration {
            extrinsic,
            intrinsic: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
        })
    }

    /// Forward-looking camera for a LiDAR with x forward, y left, z up, mounted
    /// 0.3 m below the LiDAR. Horizontal field of view is 90 degrees.
    pub fn forward_facing(width: usize, height: usize) -> Self {
        let f = width as f64 / 2.0;
        let extrinsic = [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, -0.3],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Calibration::new(extrinsic, f, f, width as f64 / 2.0, height as f64 / 2.0)
            .expect("forward-facing calibration is valid")
    }

    pub fn extrinsic(&self) -> &[[f64; 4]; 4] {
        &self.extrinsic
    }

    pub fn intrinsic(&self) -> &[[f64; 3]; 3] {
        &self.intrinsic
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsic[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsic[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsic[1][2]
    }

    /// LiDAR-frame point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3];
        }
        out
    }

    /// Camera-frame point back to the LiDAR frame.
    pub fn to_lidar(&self, c: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let d = [c[0] - e[0][3], c[1] - e[1][3], c[2] - e[2][3]];
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = e[0][k] * d[0] + e[1][k] * d[1] + e[2][k] * d[2];
        }
        out
    }

    /// LiDAR-frame point lying on the ray through pixel `(u, v)` at camera depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let x = (u - self.cx()) / self.fx() * depth;
        let y = (v - self.cy()) / self.fy() * depth;
        self.to_lidar([x, y, depth])
    }
}

/// Projection of one point: real pixel coordinates before rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Projection {
    /// Integer pixel `(x, y)` for valid projections.
    pub fn pixel(&self) -> Option<(usize, usize)> {
        self.valid
            .then(|| (self.u.round() as usize, self.v.round() as usize))
    }
}

/// Projects every point; a projection is valid iff the camera-frame depth is
/// positive and the rounded pixel lies inside the image.
pub fn project_points(
    cloud: &PointCloud,
    calib: &Calibration,
    width: usize,
    height: usize,
) -> Vec<Projection> {
    cloud
        .positions()
        .iter()
        .map(|&p| project_point(p, calib, width, height))
        .collect()
}

pub fn project_point(p: [f64; 3], calib: &Calibration, width: usize, height: usize) -> Projection {
    let c = calib.to_camera(p);
    let depth = c[2];
    if depth <= 0.0 {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            valid: false,
        };
    }
    let u = calib.fx() * c[0] / depth + calib.cx();
    let v = calib.fy() * c[1] / depth + calib.cy();
    let inside = |x: f64, n: usize| x >= -0.5 && x < n as f64 - 0.5;
    Projection {
        u,
        v,
        depth,
        valid: inside(u, width) && inside(v, height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_calib() -> Calibration {
        let mut e = [[0.0; 4]; 4];
        for (i, row) in e.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Calibration::new(e, 100.0, 100.0, 320.0, 180.0).unwrap()
    }

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::with_intensity(points, vec![0.5; n]).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project_points(&cloud(vec![[0.0, 0.0, 5.0]]), &identity_calib(), 640, 360);
        assert_eq!((p[0].u, p[0].v), (320.0, 180.0));
        assert!(p[0].valid);
    }

    #[test]
    fn offset_point_projection() {
        let p = project_points(&cloud(vec![[1.0, 0.0, 5.0]]), &identity_calib(), 640, 360);
        // u = f * x / z + cx = 100 * 0.2 + 320
        assert!((p[0].u - 340.0).abs() < 1e-12);
        assert!((p[0].v - 180.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let p = project_points(
            &cloud(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]),
            &identity_calib(),
            640,
            360,
        );
        assert!(!p[0].valid && !p[1].valid);
    }

    #[test]
    fn outside_bounds_is_invalid() {
        let p = project_points(&cloud(vec![[20.0, 0.0, 5.0]]), &identity_calib(), 640, 360);
        assert!(!p[0].valid);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut e = [[0.0; 4]; 4];
        e[0][0] = 1.0;
        e[1][1] = 1.0;
        e[2][2] = 1.1;
        e[3][3] = 1.0;
        assert!(Calibration::new(e, 1.0, 1.0, 0.0, 0.0).is_err());
        let mut id = [[0.0; 4]; 4];
        (0..4).for_each(|i| id[i][i] = 1.0);
        assert!(Calibration::new(id, 0.0, 1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pixel_ray_round_trip(u in 0.0f64..639.0, v in 0.0f64..359.0, d in 0.5f64..80.0) {
            let calib = Calibration::forward_facing(640, 360);
            let p = calib.unproject(u, v, d);
            let proj = project_point(p, &calib, 640, 360);
            prop_assert!(proj.valid);
            prop_assert!((proj.u - u).abs() < 1e-6);
            prop_assert!((proj.v - v).abs() < 1e-6);
        }
    }
}
