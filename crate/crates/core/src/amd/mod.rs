//! Asymmetric multimodal drop: panoptic-aware dropout applied to exactly one
//! modality (image or LiDAR) of a labeled source frame.

mod canny;

pub use canny::{canny_edges, EdgeMap};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{project_points, CameraImage};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::panoptic::PanopticLabeling;
use crate::synth::derive_seed;
use crate::voxel::{CylindricalVoxelGrid, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropRatios {
    pub r2d_bd: f64,
    pub r3d_bd: f64,
    pub r2d_ins: f64,
    pub r3d_ins: f64,
    pub patch_size: usize,
    /// Probability of choosing the image branch.
    pub modality_prob: f64,
    /// Minimum edge-pixel fraction of a boundary patch.
    pub edge_fraction_min: f64,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for DropRatios {
    fn default() -> Self {
        DropRatios {
            r2d_bd: 0.5,
            r3d_bd: 0.7,
            r2d_ins: 0.5,
            r3d_ins: 0.5,
            patch_size: 32,
            modality_prob: 0.5,
            edge_fraction_min: 0.02,
            canny_low: 0.1,
            canny_high: 0.2,
        }
    }
}

impl DropRatios {
    pub fn zero() -> Self {
        DropRatios {
            r2d_bd: 0.0,
            r3d_bd: 0.0,
            r2d_ins: 0.0,
            r3d_ins: 0.0,
            ..DropRatios::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![
            self.r2d_bd,
            self.r3d_bd,
            self.r2d_ins,
            self.r3d_ins,
            self.modality_prob,
            self.edge_fraction_min,
        ]
        .into_iter()
        .all(unit)
            || self.patch_size == 0
            || !(0.0 <= self.canny_low && self.canny_low <= self.canny_high)
        {
            return Err(Error::Config(format!("invalid drop ratios {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Lidar,
}

/// Patch `(row, col)` in the patch grid.
pub type PatchCoord = (usize, usize);

/// Patches whose edge-pixel fraction is at least `edge_fraction_min` (and
/// that contain at least one edge pixel). The grid covers the whole image;
/// the last row/column may be partial.
pub fn detect_image_boundary_patches(
    edges: &EdgeMap,
    patch_size: usize,
    edge_fraction_min: f64,
) -> BTreeSet<PatchCoord> {
    let rows = edges.height.div_ceil(patch_size);
    let cols = edges.width.div_ceil(patch_size);
    let mut out = BTreeSet::new();
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * patch_size, c * patch_size);
            let (y1, x1) = ((y0 + patch_size).min(edges.height), (x0 + patch_size).min(edges.width));
            let count = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| edges.get(x, y))
                .count();
            let area = (y1 - y0) * (x1 - x0);
            if count > 0 && count as f64 / area as f64 >= edge_fraction_min {
                out.insert((r, c));
            }
        }
    }
    out
}

/// Occupied voxels with a 6-neighbor (azimuth wrapping) whose majority
/// semantic class differs. Majority ties go to the lower class id.
pub fn detect_voxel_boundaries(
    grid: &CylindricalVoxelGrid,
    labels: &PanopticLabeling,
) -> Result<BTreeSet<u32>> {
    if labels.len() != grid.indices().len() {
        return Err(Error::Shape("labels do not cover the voxelized points".into()));
    }
    let majority = voxel_majority(grid, labels);
    let spec = grid.spec();
    let mut out = BTreeSet::new();
    for (&v, &class) in &majority {
        if spec
            .neighbors6(v)
            .any(|n| majority.get(&n).is_some_and(|&c| c != class))
        {
            out.insert(v);
        }
    }
    Ok(out)
}

fn voxel_majority(grid: &CylindricalVoxelGrid, labels: &PanopticLabeling) -> BTreeMap<u32, u32> {
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (i, &v) in grid.indices().iter().enumerate() {
        if v != crate::voxel::OUT_OF_RANGE {
            *counts.entry(v).or_default().entry(labels.class_of(i)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(v, per_class)| {
            // BTreeMap iterates classes ascending, so max_by keeps the lowest on ties.
            let best = per_class
                .iter()
                .fold((0u32, 0usize), |best, (&c, &n)| if n > best.1 { (c, n) } else { best });
            (v, best.0)
        })
        .collect()
}

/// Precomputed drop candidates of one labeled frame. Depends only on the
/// frame content, so it can be cached across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryAnalysis {
    pub boundary_patches: Vec<PatchCoord>,
    /// Boundary voxels with their member points.
    pub boundary_voxels: Vec<(u32, Vec<usize>)>,
    /// Candidate interior patches per thing instance (image branch).
    pub instance_patches: Vec<Vec<PatchCoord>>,
    /// Instance points grouped by the patch they project into (LiDAR branch).
    pub instance_clusters: Vec<Vec<(PatchCoord, Vec<usize>)>>,
    pub patch_size: usize,
}

impl BoundaryAnalysis {
    pub fn compute(frame: &Frame, ratios: &DropRatios, grid: &GridSpec) -> Result<Self> {
        ratios.validate()?;
        let labels = frame
            .labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("asymmetric drop needs ground-truth labels".into()))?;
        let edges = canny_edges(&frame.image, ratios.canny_low, ratios.canny_high);
        let boundary_patches =
            detect_image_boundary_patches(&edges, ratios.patch_size, ratios.edge_fraction_min)
                .into_iter()
                .collect();

        let vgrid = CylindricalVoxelGrid::build(&frame.cloud, *grid)?;
        let boundary = detect_voxel_boundaries(&vgrid, labels)?;
        let mut occupancy = vgrid.occupancy();
        let boundary_voxels = boundary
            .into_iter()
            .map(|v| (v, occupancy.remove(&v).unwrap_or_default()))
            .collect();

        let (w, h) = (frame.image.width(), frame.image.height());
        let ps = ratios.patch_size;
        let projections = project_points(&frame.cloud, &frame.calib, w, h);
        let patch_of: Vec<Option<PatchCoord>> = projections
            .iter()
            .map(|p| p.pixel().map(|(x, y)| (y / ps, x / ps)))
            .collect();
        // Projected point count per patch over all points.
        let mut patch_totals: BTreeMap<PatchCoord, usize> = BTreeMap::new();
        for p in patch_of.iter().flatten() {
            *patch_totals.entry(*p).or_default() += 1;
        }

        let reg = labels.registry();
        let mut instance_patches = Vec::new();
        let mut instance_clusters = Vec::new();
        for (id, mask) in labels.segments() {
            if !reg.is_thing(id / crate::panoptic::INSTANCE_BASE) {
                continue;
            }
            let mut by_patch: BTreeMap<PatchCoord, Vec<usize>> = BTreeMap::new();
            for i in mask.iter() {
                if let Some(p) = patch_of[i] {
                    by_patch.entry(p).or_default().push(i);
                }
            }
            if by_patch.is_empty() {
                continue;
            }
            // Interior: the instance owns the majority of the patch's projections.
            let mut interior: Vec<PatchCoord> = by_patch
                .iter()
                .filter(|(p, pts)| 2 * pts.len() > patch_totals[p])
                .map(|(p, _)| *p)
                .collect();
            if interior.is_empty() {
                let best = by_patch
                    .iter()
                    .max_by_key(|(p, pts)| (pts.len(), std::cmp::Reverse(**p)))
                    .map(|(p, _)| *p)
                    .expect("non-empty");
                interior.push(best);
            }
            instance_patches.push(interior);
            instance_clusters.push(by_patch.into_iter().collect());
        }
        Ok(BoundaryAnalysis {
            boundary_patches,
            boundary_voxels,
            instance_patches,
            instance_clusters,
            patch_size: ps,
        })
    }
}

/// Audit record of one drop.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropReport {
    pub modality: Option<Modality>,
    pub boundary_patches_total: usize,
    pub boundary_patches_dropped: Vec<PatchCoord>,
    pub instances_eligible: usize,
    pub instance_patches_dropped: Vec<PatchCoord>,
    pub boundary_voxels_total: usize,
    pub boundary_voxels_dropped: Vec<u32>,
    /// Points in dropped boundary voxels.
    pub boundary_points_dropped: Vec<usize>,
    /// Points in dropped instance clusters.
    pub instance_points_dropped: Vec<usize>,
    pub instance_clusters_dropped: usize,
}

impl DropReport {
    pub fn image_mutated(&self) -> bool {
        !self.boundary_patches_dropped.is_empty() || !self.instance_patches_dropped.is_empty()
    }

    pub fn lidar_mutated(&self) -> bool {
        !self.boundary_points_dropped.is_empty() || !self.instance_points_dropped.is_empty()
    }

    /// Every patch written with zeros.
    pub fn dropped_patches(&self) -> impl Iterator<Item = &PatchCoord> {
        self.boundary_patches_dropped
            .iter()
            .chain(&self.instance_patches_dropped)
    }

    /// Every point whose features were zeroed.
    pub fn dropped_points(&self) -> impl Iterator<Item = &usize> {
        self.boundary_points_dropped
            .iter()
            .chain(&self.instance_points_dropped)
    }

    /// One line of `key=value` fields.
    pub fn to_log_line(&self) -> String {
        let modality = match self.modality {
            Some(Modality::Image) => "image",
            Some(Modality::Lidar) => "lidar",
            None => "none",
        };
        let mut s = format!(
            "modality={modality} bd_patches={}/{} ins_patches={}/{} bd_voxels={}/{} ins_clusters={}/{} points={}",
            self.boundary_patches_dropped.len(),
            self.boundary_patches_total,
            self.instance_patches_dropped.len(),
            self.instances_eligible,
            self.boundary_voxels_dropped.len(),
            self.boundary_voxels_total,
            self.instance_clusters_dropped,
            self.instances_eligible,
            self.boundary_points_dropped.len() + self.instance_points_dropped.len(),
        );
        s.push_str(" patches=");
        let patches: Vec<String> = self.dropped_patches().map(|(r, c)| format!("{r}:{c}")).collect();
        s.push_str(&patches.join(","));
        s.push_str(" voxels=");
        let voxels: Vec<String> = self.boundary_voxels_dropped.iter().map(u32::to_string).collect();
        s.push_str(&voxels.join(","));
        s
    }
}

/// Parsed counters of a [`DropReport::to_log_line`] line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropLogCounts {
    pub image: bool,
    pub bd_patches: (usize, usize),
    pub ins_patches: (usize, usize),
    pub bd_voxels: (usize, usize),
    pub ins_clusters: (usize, usize),
}

pub fn parse_log_line(line: &str) -> Result<DropLogCounts> {
    let bad = || crate::error::format_err("drop log", format!("bad line {line:?}"));
    let mut out = DropLogCounts::default();
    let frac = |v: &str| -> Result<(usize, usize)> {
        let (a, b) = v.split_once('/').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    };
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "modality" => out.image = v == "image",
            "bd_patches" => out.bd_patches = frac(v)?,
            "ins_patches" => out.ins_patches = frac(v)?,
            "bd_voxels" => out.bd_voxels = frac(v)?,
            "ins_clusters" => out.ins_clusters = frac(v)?,
            _ => {}
        }
    }
    Ok(out)
}

/// Computes the drop candidates and applies the drop. Needs ground truth.
pub fn amd_apply(frame: &Frame, ratios: &DropRatios, seed: u64) -> Result<(Frame, DropReport)> {
    let analysis = BoundaryAnalysis::compute(frame, ratios, &GridSpec::default())?;
    amd_apply_with(frame, &analysis, ratios, seed)
}

/// Applies the drop with precomputed candidates. Exactly one modality is
/// chosen (image with probability `modality_prob`); point positions are never
/// modified and dropped image regions are written with 0 in every channel.
pub fn amd_apply_with(
    frame: &Frame,
    analysis: &BoundaryAnalysis,
    ratios: &DropRatios,
    seed: u64,
) -> Result<(Frame, DropReport)> {
    ratios.validate()?;
    if frame.labels.is_none() {
        return Err(Error::Precondition("asymmetric drop needs ground-truth labels".into()));
    }
    let mut choose = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut bd_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut ins_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let modality = if choose.gen::<f64>() < ratios.modality_prob {
        Modality::Image
    } else {
        Modality::Lidar
    };

    let mut out = frame.clone();
    let mut report = DropReport {
        modality: Some(modality),
        boundary_patches_total: analysis.boundary_patches.len(),
        boundary_voxels_total: analysis.boundary_voxels.len(),
        instances_eligible: analysis.instance_patches.len(),
        ..DropReport::default()
    };
    match modality {
        Modality::Image => {
            for &p in &analysis.boundary_patches {
                if bd_rng.gen::<f64>() < ratios.r2d_bd {
                    report.boundary_patches_dropped.push(p);
                }
            }
            for candidates in &analysis.instance_patches {
                let fire = ins_rng.gen::<f64>() < ratios.r2d_ins;
                let pick = *candidates.choose(&mut ins_rng).expect("non-empty candidates");
                if fire {
                    report.instance_patches_dropped.push(pick);
                }
            }
            for &p in report.dropped_patches() {
                zero_patch(&mut out.image, p, analysis.patch_size);
            }
        }
        Modality::Lidar => {
            for (v, points) in &analysis.boundary_voxels {
                if bd_rng.gen::<f64>() < ratios.r3d_bd {
                    report.boundary_voxels_dropped.push(*v);
                    report.boundary_points_dropped.extend(points);
                }
            }
            for clusters in &analysis.instance_clusters {
                let fire = ins_rng.gen::<f64>() < ratios.r3d_ins;
                let (_, points) = clusters.choose(&mut ins_rng).expect("non-empty clusters");
                if fire {
                    report.instance_clusters_dropped += 1;
                    report.instance_points_dropped.extend(points);
                }
            }
            let dropped: Vec<usize> = report.dropped_points().copied().collect();
            for i in dropped {
                out.cloud.zero_features(i);
            }
        }
    }
    Ok((out, report))
}

fn zero_patch(image: &mut CameraImage, (r, c): PatchCoord, ps: usize) {
    let (y0, x0) = (r * ps, c * ps);
    for y in y0..(y0 + ps).min(image.height()) {
        for x in x0..(x0 + ps).min(image.width()) {
            image.set_pixel(x, y, [0.0; 3]);
        }
    }
}

/// Checks that every reported patch is black and every reported point has
/// all-zero features in `dropped`.
pub fn report_consistent(dropped: &Frame, report: &DropReport, patch_size: usize) -> bool {
    let img = &dropped.image;
    let patches_ok = report.dropped_patches().all(|&(r, c)| {
        (r * patch_size..((r + 1) * patch_size).min(img.height())).all(|y| {
            (c * patch_size..((c + 1) * patch_size).min(img.width()))
                .all(|x| img.pixel(x, y) == [0.0; 3])
        })
    });
    let points_ok = report
        .dropped_points()
        .all(|&i| dropped.cloud.feature_row(i).iter().all(|&v| v == 0.0));
    patches_ok && points_ok
}

/// Summary line for logs.
pub fn summarize(reports: &[DropReport]) -> String {
    let mut s = String::new();
    let images = reports
        .iter()
        .filter(|r| r.modality == Some(Modality::Image))
        .count();
    let _ = write!(s, "frames={} image={} lidar={}", reports.len(), images, reports.len() - images);
    s
}
