use crate::error::{Error, Result};
use crate::mask::PointMask;
use crate::voxel::RadiusIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// Neighborhood radius, meters.
    pub eps: f64,
    /// Minimum neighborhood size (the point itself included) of a core point.
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            eps: 0.5,
            min_pts: 10,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) || self.min_pts == 0 {
            return Err(Error::Config("clustering needs eps > 0 and min_pts >= 1".into()));
        }
        Ok(())
    }
}

/// Groups a subset of points into disjoint clusters.
pub trait Clusterer {
    /// Clusters the points selected by `subset`; returned masks span all points.
    fn cluster(&self, positions: &[[f64; 3]], subset: &PointMask) -> Result<Vec<PointMask>>;
}

/// Density clustering with DBSCAN semantics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dbscan(pub ClusterParams);

impl Clusterer for Dbscan {
    fn cluster(&self, positions: &[[f64; 3]], subset: &PointMask) -> Result<Vec<PointMask>> {
        let members: Vec<usize> = subset.iter().collect();
        let local: Vec<[f64; 3]> = members.iter().map(|&i| positions[i]).collect();
        let labels = dbscan_labels(&local, &self.0)?;
        let n_clusters = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        let mut masks = vec![PointMask::new(positions.len()); n_clusters];
        for (j, label) in labels.iter().enumerate() {
            if let Some(c) = label {
                masks[*c].insert(members[j]);
            }
        }
        Ok(masks)
    }
}

/// DBSCAN cluster label per point (`None` = noise).
///
/// Core points have at least `min_pts` points (themselves included) within
/// `eps`. Clusters are the connected components of core points; a border
/// point joins the cluster of its nearest core neighbor (ties to the lower
/// index). Clusters are numbered by their lowest member index, and clusters
/// left with fewer than `min_pts` members are discarded as noise.
pub fn dbscan_labels(points: &[[f64; 3]], params: &ClusterParams) -> Result<Vec<Option<usize>>> {
    params.validate()?;
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let index = RadiusIndex::new(points, params.eps)?;
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| index.neighbors(i)).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in (0..n).filter(|&i| core[i]) {
        for &j in &neighbors[i] {
            if j > i && core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    // Root is always the lowest index of the component.
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            root_of[i] = Some(find(&mut parent, i));
        } else {
            let mut best: Option<(f64, usize)> = None;
            for &j in &neighbors[i] {
                if core[j] {
                    let d2: f64 = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum();
                    if best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                        best = Some((d2, j));
                    }
                }
            }
            root_of[i] = best.map(|(_, j)| find(&mut parent, j));
        }
    }

    // Number components by lowest member index, dropping undersized ones.
    let mut size = vec![0usize; n];
    let mut first = vec![usize::MAX; n];
    for (i, r) in root_of.iter().enumerate() {
        if let Some(r) = *r {
            size[r] += 1;
            first[r] = first[r].min(i);
        }
    }
    let mut roots: Vec<usize> = (0..n)
        .filter(|&r| size[r] >= params.min_pts && size[r] > 0)
        .collect();
    roots.sort_by_key(|&r| first[r]);
    let mut number = vec![None; n];
    for (k, &r) in roots.iter().enumerate() {
        number[r] = Some(k);
    }
    Ok(root_of.into_iter().map(|r| r.and_then(|r| number[r])).collect())
}

/// Clusters the non-ground points; the ground is the complement of `nonground`.
pub fn cluster_nonground(
    positions: &[[f64; 3]],
    nonground: &PointMask,
    params: &ClusterParams,
) -> Result<super::GeometricSuperpoints> {
    if positions.len() != nonground.len() {
        return Err(Error::Shape("mask length differs from point count".into()));
    }
    let clusters = Dbscan(*params).cluster(positions, nonground)?;
    let mut ground = PointMask::full(positions.len());
    ground.subtract(nonground)?;
    Ok(super::GeometricSuperpoints { ground, clusters })
}
