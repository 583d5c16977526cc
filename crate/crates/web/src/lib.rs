//! WebAssembly bindings for the static demo page in `www/`.
//!
//! One [`Demo`] holds a generated frame. The page draws the camera image and a
//! bird's-eye view of the points, and calls the three operations below.

use std::sync::Arc;

use panda_core::amd::{amd_apply, DropRatios};
use panda_core::metrics::evaluate;
use panda_core::pseudolabel::{refine, PredictionSet, Segment, Thresholds};
use panda_core::superpoints::{extract_geometric_superpoints, lift_visual_masks, ClusterParams, Dbscan, RansacParams};
use panda_core::synth::{
    apply_domain_shift, class_color, derive_seed, generate_scene, oracle_proposals, OracleParams, SceneConfig,
    ShiftParams,
};
use panda_core::{ClassRegistry, Frame, PanopticLabeling, PointMask};
use wasm_bindgen::prelude::*;

const UNLABELED: [u8; 3] = [90, 90, 90];
const DROPPED: [u8; 3] = [20, 20, 20];

fn to_u8(c: [f32; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn err(e: panda_core::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    original: Frame,
    shown: Frame,
    colors: Vec<u8>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a scene; `shifted` applies the night-and-rain target shift.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, shifted: bool) -> Result<Demo, String> {
        let seed = u64::from(seed);
        let mut frame = generate_scene(&SceneConfig {
            seed,
            ..SceneConfig::default()
        })
        .map_err(err)?;
        if shifted {
            frame = apply_domain_shift(&frame, &ShiftParams::desk_standard(), derive_seed(seed, 1)).map_err(err)?;
        }
        let mut demo = Demo {
            shown: frame.clone(),
            original: frame,
            colors: Vec::new(),
        };
        demo.colors = demo.class_colors(demo.original.labels().map_err(err)?);
        Ok(demo)
    }

    pub fn width(&self) -> usize {
        self.shown.image.width()
    }

    pub fn height(&self) -> usize {
        self.shown.image.height()
    }

    pub fn point_count(&self) -> usize {
        self.shown.len()
    }

    /// Current camera image as RGBA bytes.
    pub fn image_rgba(&self) -> Vec<u8> {
        self.shown
            .image
            .data()
            .chunks_exact(3)
            .flat_map(|c| {
                let [r, g, b] = to_u8([c[0], c[1], c[2]]);
                [r, g, b, 255]
            })
            .collect()
    }

    /// Interleaved x, y of every point.
    pub fn points_xy(&self) -> Vec<f32> {
        self.shown.cloud.positions().iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
    }

    /// Interleaved RGB of every point for the current view.
    pub fn point_colors(&self) -> Vec<u8> {
        self.colors.clone()
    }

    /// Back to the generated frame colored by ground truth.
    pub fn reset(&mut self) -> Result<(), String> {
        self.shown = self.original.clone();
        self.colors = self.class_colors(self.original.labels().map_err(err)?);
        Ok(())
    }

    /// Drops image patches or LiDAR points around boundaries and instances with
    /// the default ratios. Returns the drop log line.
    pub fn drop_modality(&mut self, seed: u32) -> Result<String, String> {
        let (out, report) = amd_apply(&self.original, &DropRatios::default(), u64::from(seed)).map_err(err)?;
        let mut colors = self.class_colors(self.original.labels().map_err(err)?);
        for &i in report.dropped_points() {
            colors[3 * i..3 * i + 3].copy_from_slice(&DROPPED);
        }
        self.shown = out;
        self.colors = colors;
        Ok(report.to_log_line())
    }

    /// Corrupts the ground truth into a teacher prediction (a fifth of the
    /// stuff points removed, one thing relabeled with low confidence), then
    /// refines it with geometric and visual superpoints. Colors the refined
    /// labels and returns a before/after summary.
    pub fn refine_corrupted(&mut self, seed: u32) -> Result<String, String> {
        let gt = self.original.labels().map_err(err)?.clone();
        let teacher = corrupt(&gt, u64::from(seed)).map_err(err)?;
        let geo = extract_geometric_superpoints(
            &self.original.cloud,
            &RansacParams::default(),
            &Dbscan(ClusterParams::default()),
        )
        .map_err(err)?;
        let oracle = OracleParams {
            p_flip: 0.0,
            ..OracleParams::default()
        };
        let proposals = oracle_proposals(&self.original, &oracle, u64::from(seed)).map_err(err)?;
        let vis = lift_visual_masks(&proposals, &self.original).map_err(err)?;
        let refined = refine(&teacher, &geo, &vis, &Thresholds::default()).map_err(err)?;

        let before = teacher.to_labeling().map_err(err)?;
        let after = refined.to_labeling().map_err(err)?;
        let pq = |l: &PanopticLabeling| -> Result<f64, String> {
            Ok(evaluate([(l, &gt)]).map_err(err)?.map_or(0.0, |r| 100.0 * r.pq))
        };
        let covered = |l: &PanopticLabeling| l.ids().iter().filter(|&&id| id != 0).count();
        let n = gt.len().max(1) as f64;
        let summary = format!(
            "teacher PQ {:.1}, coverage {:.1}%  ->  refined PQ {:.1}, coverage {:.1}%",
            pq(&before)?,
            100.0 * covered(&before) as f64 / n,
            pq(&after)?,
            100.0 * covered(&after) as f64 / n,
        );
        self.shown = self.original.clone();
        self.colors = self.class_colors(&after);
        Ok(summary)
    }
}

impl Demo {
    fn class_colors(&self, labels: &PanopticLabeling) -> Vec<u8> {
        let reg = labels.registry();
        (0..labels.len())
            .flat_map(|i| match labels.class_of(i) {
                0 => UNLABELED,
                c => to_u8(class_color(reg, c)),
            })
            .collect()
    }
}

/// Teacher prediction derived from ground truth: every fifth stuff point on
/// average is removed, and one thing segment takes the next thing class with
/// confidence 0.7 while every other segment keeps confidence 1.
pub fn corrupt(gt: &PanopticLabeling, seed: u64) -> panda_core::Result<PredictionSet> {
    let reg: Arc<ClassRegistry> = gt.registry().clone();
    let things: Vec<u32> = reg.things().collect();
    let segs = gt.segments();
    let thing_ids: Vec<u32> = segs.keys().copied().filter(|id| reg.is_thing(id / 1000)).collect();
    let flipped = (!thing_ids.is_empty()).then(|| thing_ids[(derive_seed(seed, u64::MAX) % thing_ids.len() as u64) as usize]);
    let mut point_conf = vec![0.0; gt.len()];
    let mut segments = Vec::new();
    for (id, mask) in segs {
        let class = id / 1000;
        let mut mask: PointMask = mask;
        if reg.is_stuff(class) {
            let drop: Vec<usize> = mask.iter().filter(|&i| derive_seed(seed, i as u64) % 5 == 0).collect();
            for i in drop {
                mask.remove(i);
            }
        }
        let (class, score) = if Some(id) == flipped {
            let k = things.iter().position(|&c| c == class).unwrap_or(0);
            (things[(k + 1) % things.len()], 0.7)
        } else {
            (class, 1.0)
        };
        for i in mask.iter() {
            point_conf[i] = 1.0;
        }
        segments.push(Segment { class, score, mask });
    }
    PredictionSet::new(segments, point_conf, reg)
}
