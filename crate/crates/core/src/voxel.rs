//! Cylindrical voxelization and a cylindrical bucket index for radius queries.
//!
//! Azimuth is measured from the +x axis, counter-clockwise, in `[0, 2π)`.

use std::collections::HashMap;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::frame::PointCloud;

/// Sentinel voxel index for points outside the grid ranges.
pub const OUT_OF_RANGE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// (radial, azimuthal, height) bin counts.
    pub dims: [usize; 3],
    pub r_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dims: [480, 360, 32],
            r_range: (0.0, 50.0),
            z_range: (-5.0, 3.0),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero bin count in {:?}", self.dims)));
        }
        let (r0, r1) = self.r_range;
        let (z0, z1) = self.z_range;
        if ![r0, r1, z0, z1].iter().all(|v| v.is_finite()) || r0 >= r1 || z0 >= z1 || r0 < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "bad ranges r={:?} z={:?}",
                self.r_range, self.z_range
            )));
        }
        if self.dims.iter().product::<usize>() >= OUT_OF_RANGE as usize {
            return Err(Error::InvalidGrid("too many voxels for u32 indices".into()));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `(radial, azimuth, height)` bin of a point, or `None` when out of range.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let r = p[0].hypot(p[1]);
        let theta = p[1].atan2(p[0]).rem_euclid(TAU);
        let ir = bin(r, self.r_range, self.dims[0])?;
        let iz = bin(p[2], self.z_range, self.dims[2])?;
        let ia = ((theta / TAU) * self.dims[1] as f64) as usize;
        Some([ir, ia.min(self.dims[1] - 1), iz])
    }

    pub fn linear(&self, cell: [usize; 3]) -> u32 {
        ((cell[0] * self.dims[1] + cell[1]) * self.dims[2] + cell[2]) as u32
    }

    pub fn cell(&self, index: u32) -> [usize; 3] {
        let i = index as usize;
        let h = i % self.dims[2];
        let a = (i / self.dims[2]) % self.dims[1];
        let r = i / (self.dims[2] * self.dims[1]);
        [r, a, h]
    }

    /// Axis neighbors of a voxel: radial and height do not wrap, azimuth does.
    pub fn neighbors6(&self, index: u32) -> impl Iterator<Item = u32> + '_ {
        let [r, a, h] = self.cell(index);
        let [nr, na, nh] = self.dims;
        let mut out = Vec::with_capacity(6);
        if r > 0 {
            out.push([r - 1, a, h]);
        }
        if r + 1 < nr {
            out.push([r + 1, a, h]);
        }
        if na > 1 {
            out.push([r, (a + na - 1) % na, h]);
            if na > 2 {
                out.push([r, (a + 1) % na, h]);
            }
        }
        if h > 0 {
            out.push([r, a, h - 1]);
        }
        if h + 1 < nh {
            out.push([r, a, h + 1]);
        }
        out.into_iter().map(move |c| self.linear(c))
    }
}

fn bin(v: f64, (lo, hi): (f64, f64), n: usize) -> Option<usize> {
    if !(v >= lo && v < hi) {
        return None;
    }
    let b = ((v - lo) / (hi - lo) * n as f64) as usize;
    Some(b.min(n - 1))
}

/// Per-point voxel assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CylindricalVoxelGrid {
    spec: GridSpec,
    indices: Vec<u32>,
}

impl CylindricalVoxelGrid {
    pub fn build(cloud: &PointCloud, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let indices = cloud
            .positions()
            .iter()
            .map(|&p| spec.cell_of(p).map_or(OUT_OF_RANGE, |c| spec.linear(c)))
            .collect();
        Ok(CylindricalVoxelGrid { spec, indices })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Voxel index per point (`OUT_OF_RANGE` for points outside the grid).
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Occupied voxels mapped to the points they contain (ascending point order).
    pub fn occupancy(&self) -> HashMap<u32, Vec<usize>> {
        let mut map: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, &v) in self.indices.iter().enumerate() {
            if v != OUT_OF_RANGE {
                map.entry(v).or_default().push(i);
            }
        }
        map
    }
}

/// Fixed-radius neighbor search over cylindrical buckets.
///
/// Radial and height bucket sizes are at least the radius, so only adjacent
/// radial/height buckets are scanned. The azimuth scan span for a pair of
/// radial rings is derived from the smaller ring radius; rings closer to the
/// axis than the radius scan the full circle.
pub struct RadiusIndex<'a> {
    points: &'a [[f64; 3]],
    radius: f64,
    dr: f64,
    n_r: usize,
    n_a: usize,
    n_z: usize,
    cells: Vec<[usize; 3]>,
    order: Vec<u32>,
    buckets: HashMap<u64, (u32, u32)>,
}

impl<'a> RadiusIndex<'a> {
    pub fn new(points: &'a [[f64; 3]], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidGrid(format!("radius must be positive, got {radius}")));
        }
        let (mut r_max, mut z_min, mut z_max) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            r_max = r_max.max(p[0].hypot(p[1]));
            z_min = z_min.min(p[2]);
            z_max = z_max.max(p[2]);
        }
        if points.is_empty() {
            z_min = 0.0;
            z_max = 0.0;
        }
        let n_r = ((r_max / radius).floor() as usize + 1).max(1);
        let n_z = (((z_max - z_min) / radius).floor() as usize + 1).max(1);
        // Arc length of one azimuth bucket roughly equals the radius at the outer edge.
        let n_a = ((TAU * r_max / radius).floor() as usize).clamp(1, 4096);
        let dr = radius;
        let cells: Vec<[usize; 3]> = points
            .iter()
            .map(|p| {
                let r = p[0].hypot(p[1]);
                let th = p[1].atan2(p[0]).rem_euclid(TAU);
                [
                    ((r / dr) as usize).min(n_r - 1),
                    ((th / TAU * n_a as f64) as usize).min(n_a - 1),
                    (((p[2] - z_min) / radius) as usize).min(n_z - 1),
                ]
            })
            .collect();
        let key = |c: &[usize; 3]| ((c[0] * n_a + c[1]) * n_z + c[2]) as u64;
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        order.sort_by_key(|&i| (key(&cells[i as usize]), i));
        let mut buckets = HashMap::new();
        let mut start = 0usize;
        while start < order.len() {
            let k = key(&cells[order[start] as usize]);
            let mut end = start + 1;
            while end < order.len() && key(&cells[order[end] as usize]) == k {
                end += 1;
            }
            buckets.insert(k, (start as u32, end as u32));
            start = end;
        }
        Ok(RadiusIndex {
            points,
            radius,
            dr,
            n_r,
            n_a,
            n_z,
            cells,
            order,
            buckets,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Calls `f(j, squared_distance)` for every indexed point `j` within the
    /// radius of point `i` (including `i` itself). Visit order is unspecified.
    pub fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let q = self.points[i];
        let [ir, ia, iz] = self.cells[i];
        let r2 = self.radius * self.radius;
        for jr in ir.saturating_sub(1)..=(ir + 1).min(self.n_r - 1) {
            let rho = self.dr * ir.min(jr) as f64;
            let span = if rho > self.radius {
                (self.radius / rho).asin()
            } else {
                std::f64::consts::PI
            };
            let bin_width = TAU / self.n_a as f64;
            let steps = (span / bin_width).ceil() as usize;
            let azimuths: Vec<usize> = if 2 * steps + 1 >= self.n_a {
                (0..self.n_a).collect()
            } else {
                (0..=2 * steps)
                    .map(|k| (ia + self.n_a + k - steps) % self.n_a)
                    .collect()
            };
            for ja in azimuths {
                for jz in iz.saturating_sub(1)..=(iz + 1).min(self.n_z - 1) {
                    let key = ((jr * self.n_a + ja) * self.n_z + jz) as u64;
                    if let Some(&(s, e)) = self.buckets.get(&key) {
                        for &j in &self.order[s as usize..e as usize] {
                            let p = self.points[j as usize];
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 <= r2 {
                                f(j as usize, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Neighbor indices of point `i` within the radius, ascending, including `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_neighbor(i, |j, _| out.push(j));
        out.sort_unstable();
        out
    }

    pub fn count_neighbors(&self, i: usize) -> usize {
        let mut n = 0;
        self.for_each_neighbor(i, |_, _| n += 1);
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::with_intensity(points, vec![0.0; n]).unwrap()
    }

    #[test]
    fn hand_computed_bins() {
        let spec = GridSpec::default();
        let cell = spec.cell_of([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(cell, [9, 0, 20]);
    }

    #[test]
    fn out_of_range_gets_sentinel() {
        let grid =
            CylindricalVoxelGrid::build(&cloud(vec![[60.0, 0.0, 0.0], [1.0, 0.0, 9.0]]), GridSpec::default())
                .unwrap();
        assert_eq!(grid.indices(), &[OUT_OF_RANGE, OUT_OF_RANGE]);
    }

    #[test]
    fn same_cell_same_index() {
        let grid = CylindricalVoxelGrid::build(
            &cloud(vec![[10.0, 0.01, 0.0], [10.02, 0.012, 0.05]]),
            GridSpec::default(),
        )
        .unwrap();
        assert_eq!(grid.indices()[0], grid.indices()[1]);
        assert_ne!(grid.indices()[0], OUT_OF_RANGE);
    }

    #[test]
    fn zero_dims_rejected() {
        let spec = GridSpec {
            dims: [10, 0, 4],
            ..GridSpec::default()
        };
        assert!(matches!(
            CylindricalVoxelGrid::build(&cloud(vec![[1.0, 0.0, 0.0]]), spec),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn azimuth_wraps_to_adjacent_bins() {
        let spec = GridSpec::default();
        let eps = 1e-6;
        let a = spec.cell_of([10.0, -eps, 0.0]).unwrap();
        let b = spec.cell_of([10.0, eps, 0.0]).unwrap();
        assert_eq!(a[1], 359);
        assert_eq!(b[1], 0);
        let ia = spec.linear(a);
        assert!(spec.neighbors6(ia).any(|n| n == spec.linear(b)));
    }

    #[test]
    fn linear_round_trip() {
        let spec = GridSpec::default();
        for cell in [[0, 0, 0], [479, 359, 31], [12, 200, 7]] {
            assert_eq!(spec.cell(spec.linear(cell)), cell);
        }
    }

    #[test]
    fn radius_index_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for radius in [0.3, 0.5, 1.5] {
            let pts: Vec<[f64; 3]> = (0..600)
                .map(|_| {
                    [
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let index = RadiusIndex::new(&pts, radius).unwrap();
            for i in 0..pts.len() {
                let brute: Vec<usize> = (0..pts.len())
                    .filter(|&j| {
                        let d2: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                        d2 <= radius * radius
                    })
                    .collect();
                assert_eq!(index.neighbors(i), brute, "point {i}, radius {radius}");
            }
        }
    }

    proptest! {
        #[test]
        fn voxelization_is_total_over_in_range_points(
            pts in proptest::collection::vec((0.0f64..49.9, -3.14f64..3.14, -4.99f64..2.99), 1..100)
        ) {
            let points: Vec<[f64; 3]> = pts.iter().map(|&(r, t, z)| [r * t.cos(), r * t.sin(), z]).collect();
            let c = cloud(points);
            let a = CylindricalVoxelGrid::build(&c, GridSpec::default()).unwrap();
            let b = CylindricalVoxelGrid::build(&c, GridSpec::default()).unwrap();
            prop_assert_eq!(a.indices(), b.indices());
            for (i, &v) in a.indices().iter().enumerate() {
                let p = c.positions()[i];
                if p[0].hypot(p[1]) < 50.0 {
                    prop_assert!(v != OUT_OF_RANGE);
                    prop_assert!((v as usize) < GridSpec::default().num_voxels());
                }
            }
        }
    }
}
