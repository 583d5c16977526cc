use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::PointCloud;
use crate::mask::PointMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Maximum point-to-plane distance of an inlier, meters.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 256,
            inlier_threshold: 0.15,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.inlier_threshold > 0.0) {
            return Err(Error::Config(
                "RANSAC needs at least one iteration and a positive threshold".into(),
            ));
        }
        Ok(())
    }
}

/// Plane `a x + b y + c z + d = 0` with unit normal (`c >= 0`) and its inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundPlane {
    pub plane: [f64; 4],
    pub ground: PointMask,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn plane_through(p: [f64; 3], q: [f64; 3], r: [f64; 3]) -> Option<[f64; 4]> {
    let n = cross(sub(q, p), sub(r, p));
    let len = norm(n);
    let scale = norm(sub(q, p)).max(norm(sub(r, p))).max(1e-300);
    if len <= 1e-12 * scale * scale {
        return None;
    }
    let n = [n[0] / len, n[1] / len, n[2] / len];
    Some(oriented([n[0], n[1], n[2], -(n[0] * p[0] + n[1] * p[1] + n[2] * p[2])]))
}

fn oriented(plane: [f64; 4]) -> [f64; 4] {
    if plane[2] < 0.0 {
        plane.map(|v| -v)
    } else {
        plane
    }
}

fn distance(plane: &[f64; 4], p: [f64; 3]) -> f64 {
    (plane[0] * p[0] + plane[1] * p[1] + plane[2] * p[2] + plane[3]).abs()
}

/// First non-collinear triple in point order, if any.
fn find_spanning_triple(points: &[[f64; 3]]) -> Option<(usize, usize, usize)> {
    let a = 0;
    let b = (1..points.len()).find(|&i| norm(sub(points[i], points[a])) > 0.0)?;
    let c = (b + 1..points.len()).find(|&i| plane_through(points[a], points[b], points[i]).is_some())?;
    Some((a, b, c))
}

/// RANSAC ground-plane separation with a least-squares refit on the inliers.
///
/// The ground mask holds the points within the threshold of the refit plane.
pub fn segment_ground(cloud: &PointCloud, params: &RansacParams) -> Result<GroundPlane> {
    params.validate()?;
    let pts = cloud.positions();
    if pts.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane fitting needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let fallback = find_spanning_triple(pts)
        .ok_or_else(|| Error::DegenerateGeometry("all points are collinear".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = pts.len();
    let mut best: Option<([f64; 4], usize)> = None;
    for _ in 0..params.iterations {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let Some(plane) = plane_through(pts[i], pts[j], pts[k]) else {
            continue;
        };
        let support = pts
            .iter()
            .filter(|&&p| distance(&plane, p) <= params.inlier_threshold)
            .count();
        if best.is_none_or(|(_, s)| support > s) {
            best = Some((plane, support));
        }
    }
    let (plane, _) = best.unwrap_or_else(|| {
        let (a, b, c) = fallback;
        (plane_through(pts[a], pts[b], pts[c]).expect("spanning triple"), 0)
    });

    let inliers: Vec<usize> = (0..n)
        .filter(|&i| distance(&plane, pts[i]) <= params.inlier_threshold)
        .collect();
    let refit = fit_plane(inliers.iter().map(|&i| pts[i])).unwrap_or(plane);
    let ground = PointMask::from_fn(n, |i| distance(&refit, pts[i]) <= params.inlier_threshold);
    Ok(GroundPlane {
        plane: refit,
        ground,
    })
}

/// Total least-squares plane through the points (normal = smallest principal axis).
pub fn fit_plane(points: impl Iterator<Item = [f64; 3]> + Clone) -> Option<[f64; 4]> {
    let mut count = 0usize;
    let mut mean = [0.0; 3];
    for p in points.clone() {
        count += 1;
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    if count < 3 {
        return None;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = sub(p, mean);
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    let (values, vectors) = symmetric_eigen(cov);
    let smallest = (0..3)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("three eigenvalues");
    let n = [vectors[0][smallest], vectors[1][smallest], vectors[2][smallest]];
    let len = norm(n);
    if !(len > 0.0) {
        return None;
    }
    let n = n.map(|v| v / len);
    Some(oriented([
        n[0],
        n[1],
        n[2],
        -(n[0] * mean[0] + n[1] * mean[1] + n[2] * mean[2]),
    ]))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix. Eigenvectors
/// are the columns of the returned matrix.
fn symmetric_eigen(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-300 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::with_intensity(points, vec![0.0; n]).unwrap()
    }

    fn grid_plane(n_side: usize, z: f64) -> Vec<[f64; 3]> {
        (0..n_side * n_side)
            .map(|i| [(i % n_side) as f64 * 0.3 + 1.0, (i / n_side) as f64 * 0.3 - 4.0, z])
            .collect()
    }

    #[test]
    fn recovers_dominant_plane() {
        let mut pts: Vec<[f64; 3]> = (0..1000)
            .map(|i| [(i % 40) as f64 * 0.25, (i / 40) as f64 * 0.25 - 3.0, 0.0])
            .collect();
        pts.extend((0..200).map(|i| [2.0 + (i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 1.0 + (i % 7) as f64 * 0.2]));
        let res = segment_ground(&cloud(pts), &RansacParams::default()).unwrap();
        let [a, b, c, d] = res.plane;
        assert!(a.abs() < 1e-9 && b.abs() < 1e-9 && (c - 1.0).abs() < 1e-9);
        assert!(d.abs() < 1e-6);
        assert_eq!(res.ground.count(), 1000);
        assert!((0..1000).all(|i| res.ground.contains(i)));
    }

    #[test]
    fn single_plane_is_all_ground() {
        let pts = grid_plane(20, -1.7);
        let res = segment_ground(&cloud(pts), &RansacParams::default()).unwrap();
        assert_eq!(res.ground.count(), 400);
        assert!((res.plane[3] - 1.7).abs() < 1e-9);
    }

    #[test]
    fn larger_parallel_plane_wins() {
        let mut pts: Vec<[f64; 3]> = (0..800)
            .map(|i| [(i % 40) as f64 * 0.2, (i / 40) as f64 * 0.2, 0.0])
            .collect();
        pts.extend((0..300).map(|i| [(i % 20) as f64 * 0.2, (i / 20) as f64 * 0.2, 2.0]));
        let res = segment_ground(&cloud(pts), &RansacParams::default()).unwrap();
        assert_eq!(res.ground.count(), 800);
        assert!(res.plane[3].abs() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<[f64; 3]> = (0..50).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
        assert!(matches!(
            segment_ground(&cloud(pts), &RansacParams::default()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn tilted_plane_refit() {
        let pts: Vec<[f64; 3]> = (0..400)
            .map(|i| {
                let x = (i % 20) as f64 * 0.3;
                let y = (i / 20) as f64 * 0.3;
                [x, y, 0.1 * x - 0.05 * y + 0.4]
            })
            .collect();
        let res = segment_ground(&cloud(pts.clone()), &RansacParams::default()).unwrap();
        for p in &pts {
            assert!(distance(&res.plane, *p) < 1e-9);
        }
    }

    #[test]
    fn eigen_decomposition_diagonalizes() {
        let m = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]];
        let (vals, vecs) = symmetric_eigen(m);
        for k in 0..3 {
            let v = [vecs[0][k], vecs[1][k], vecs[2][k]];
            for r in 0..3 {
                let mv: f64 = (0..3).map(|c| m[r][c] * v[c]).sum();
                assert!((mv - vals[k] * v[r]).abs() < 1e-10);
            }
        }
    }
}
