use crate::camera::project_points;
use crate::error::{shape_err, Result};
use crate::frame::Frame;
use crate::mask::PointMask;

/// A 2D segmentation proposal: row-major `height x width` mask with a class
/// label and a detector confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal2d {
    pub mask: Vec<bool>,
    pub label: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSuperpoint {
    pub mask: PointMask,
    pub label: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisualSuperpoints {
    pub items: Vec<VisualSuperpoint>,
}

impl VisualSuperpoints {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Lifted proposals with fewer points than this are discarded.
pub const MIN_LIFTED_POINTS: usize = 5;

/// Lifts 2D proposals onto the points whose rounded projection falls inside the mask.
pub fn lift_visual_masks(proposals: &[Proposal2d], frame: &Frame) -> Result<VisualSuperpoints> {
    let (w, h) = (frame.image.width(), frame.image.height());
    if let Some(p) = proposals.iter().find(|p| p.mask.len() != w * h) {
        return Err(shape_err(format!(
            "proposal mask has {} pixels, image has {}",
            p.mask.len(),
            w * h
        )));
    }
    let pixels: Vec<Option<usize>> = project_points(&frame.cloud, &frame.calib, w, h)
        .iter()
        .map(|p| p.pixel().map(|(x, y)| y * w + x))
        .collect();
    let n = frame.len();
    let items = proposals
        .iter()
        .filter_map(|p| {
            let mask = PointMask::from_fn(n, |i| pixels[i].is_some_and(|px| p.mask[px]));
            (mask.count() >= MIN_LIFTED_POINTS).then(|| VisualSuperpoint {
                mask,
                label: p.label,
                confidence: p.confidence.clamp(0.0, 1.0),
            })
        })
        .collect();
    Ok(VisualSuperpoints { items })
}
