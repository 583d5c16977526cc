//! Pseudo-label initiation (confidence fusion and class-aware filtering) and
//! refinement with geometric and visual superpoints.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::mask::{mask_iou, PointMask};
use crate::panoptic::{encode_panoptic, ClassRegistry, PanopticLabeling, INSTANCE_BASE};
use crate::superpoints::{GeometricSuperpoints, VisualSuperpoints};

/// One predicted segment: argmax class, semantic confidence and point mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub class: u32,
    pub score: f64,
    pub mask: PointMask,
}

/// Teacher output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub segments: Vec<Segment>,
    /// Per-point instance confidence.
    pub point_conf: Vec<f64>,
    registry: Arc<ClassRegistry>,
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Precondition(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

impl PredictionSet {
    /// Validates lengths, confidence ranges, class ids and mask disjointness.
    pub fn new(segments: Vec<Segment>, point_conf: Vec<f64>, registry: Arc<ClassRegistry>) -> Result<Self> {
        let n = point_conf.len();
        let mut seen = PointMask::new(n);
        for s in &segments {
            if s.mask.len() != n {
                return Err(shape_err(format!("mask over {} points, expected {n}", s.mask.len())));
            }
            if s.class == 0 || registry.get(s.class).is_none() {
                return Err(Error::Precondition(format!("segment class {} not in registry", s.class)));
            }
            check_unit(s.score, "segment confidence")?;
            if !seen.is_disjoint(&s.mask)? {
                return Err(Error::Precondition("prediction masks overlap".into()));
            }
            seen.union_with(&s.mask)?;
        }
        for &c in &point_conf {
            check_unit(c, "point confidence")?;
        }
        Ok(PredictionSet {
            segments,
            point_conf,
            registry,
        })
    }

    /// Turns a labeling into a prediction with constant confidences. Each
    /// non-ignore panoptic id becomes one segment.
    pub fn from_labeling(labels: &PanopticLabeling, score: f64, point_conf: f64) -> Result<Self> {
        let segments = labels
            .segments()
            .into_iter()
            .map(|(id, mask)| Segment {
                class: id / INSTANCE_BASE,
                score,
                mask,
            })
            .collect();
        Self::new(segments, vec![point_conf; labels.len()], labels.registry().clone())
    }

    pub fn len(&self) -> usize {
        self.point_conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_conf.is_empty()
    }

    pub fn registry(&self) -> &Arc<ClassRegistry> {
        &self.registry
    }

    pub fn is_thing(&self, k: usize) -> bool {
        self.registry.is_thing(self.segments[k].class)
    }

    /// Segment index of every point (`None` when unassigned). Assumes disjoint masks.
    pub fn assignment(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (k, s) in self.segments.iter().enumerate() {
            for i in s.mask.iter() {
                out[i] = Some(k);
            }
        }
        out
    }

    /// Panoptic labeling with the numbering of [`PseudoLabelSet::to_labeling`].
    pub fn to_labeling(&self) -> Result<PanopticLabeling> {
        labeling_from(
            self.segments.iter().map(|s| (s.class, &s.mask)),
            self.len(),
            &self.registry,
        )
    }

    fn with_masks(&self, masks: Vec<PointMask>) -> PredictionSet {
        PredictionSet {
            segments: self
                .segments
                .iter()
                .zip(masks)
                .map(|(s, mask)| Segment { mask, ..s.clone() })
                .collect(),
            point_conf: self.point_conf.clone(),
            registry: self.registry.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_th: f64,
    pub stuff_keep_fraction: f64,
    pub t_cls: f64,
    pub iou_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_th: 0.63,
            stuff_keep_fraction: 0.8,
            t_cls: 0.2,
            iou_min: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.tau_th) && unit(self.t_cls) && unit(self.iou_min))
            || !(self.stuff_keep_fraction > 0.0 && self.stuff_keep_fraction <= 1.0)
        {
            return Err(Error::Config(format!("invalid thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Refined pseudo-labels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub classes: Vec<u32>,
    pub masks: Vec<PointMask>,
    /// 1 for points covered by a mask, 0 otherwise.
    pub weights: Vec<f64>,
    pub scores_norm: Vec<f64>,
    registry: Arc<ClassRegistry>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Per-point class id, 0 where uncovered.
    pub fn point_classes(&self) -> Vec<u32> {
        let mut out = vec![0; self.len()];
        for (c, m) in self.classes.iter().zip(&self.masks) {
            for i in m.iter() {
                out[i] = *c;
            }
        }
        out
    }

    /// Panoptic labeling: thing segments get instance ids 1, 2, ... per class
    /// in segment order, stuff segments instance 0. Empty masks are skipped.
    pub fn to_labeling(&self) -> Result<PanopticLabeling> {
        labeling_from(self.classes.iter().copied().zip(&self.masks), self.len(), &self.registry)
    }
}

fn labeling_from<'a>(
    segments: impl Iterator<Item = (u32, &'a PointMask)>,
    n: usize,
    registry: &Arc<ClassRegistry>,
) -> Result<PanopticLabeling> {
    let mut ids = vec![0u32; n];
    let mut next: BTreeMap<u32, u32> = BTreeMap::new();
    for (c, m) in segments {
        if m.is_empty() {
            continue;
        }
        let inst = if registry.is_thing(c) {
            let k = next.entry(c).or_insert(0);
            *k += 1;
            *k
        } else {
            0
        };
        let id = encode_panoptic(c, inst)?;
        for i in m.iter() {
            ids[i] = id;
        }
    }
    PanopticLabeling::new(ids, registry.clone())
}

/// S(p) = S_C(k(p)) * S_M(p); 0 for unassigned points.
pub fn joint_confidence(pred: &PredictionSet) -> Vec<f64> {
    let mut s = vec![0.0; pred.len()];
    for seg in &pred.segments {
        for i in seg.mask.iter() {
            s[i] = seg.score * pred.point_conf[i];
        }
    }
    s
}

/// Mean of `s` over each mask; 0 for empty masks.
pub fn instance_mean_confidence(pred: &PredictionSet, s: &[f64]) -> Vec<f64> {
    pred.segments
        .iter()
        .map(|seg| {
            let n = seg.mask.count();
            if n == 0 {
                0.0
            } else {
                seg.mask.iter().map(|i| s[i]).sum::<f64>() / n as f64
            }
        })
        .collect()
}

/// Keeps a thing mask whole iff its mean confidence is at least `tau_th`.
pub fn filter_things(pred: &PredictionSet, sbar: &[f64], tau_th: f64) -> PredictionSet {
    let masks = pred
        .segments
        .iter()
        .enumerate()
        .map(|(k, seg)| {
            if pred.is_thing(k) && sbar[k] < tau_th {
                PointMask::new(pred.len())
            } else {
                seg.mask.clone()
            }
        })
        .collect();
    pred.with_masks(masks)
}

/// Per stuff class, the score that keeps the top `keep_fraction` of the
/// points currently labeled with that class. Absent classes get 1.
pub fn compute_stuff_thresholds(s: &[f64], pred: &PredictionSet, keep_fraction: f64) -> BTreeMap<u32, f64> {
    let mut per_class: BTreeMap<u32, Vec<f64>> =
        pred.registry.stuff().map(|c| (c, Vec::new())).collect();
    for seg in &pred.segments {
        if let Some(v) = per_class.get_mut(&seg.class) {
            v.extend(seg.mask.iter().map(|i| s[i]));
        }
    }
    per_class
        .into_iter()
        .map(|(c, mut v)| {
            if v.is_empty() {
                return (c, 1.0);
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let keep = ((keep_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            (c, v[n - keep])
        })
        .collect()
}

/// Point-wise filter of stuff masks: keep p iff S(p) >= tau_st(class).
/// Points with zero joint confidence are always dropped.
pub fn filter_stuff(pred: &PredictionSet, s: &[f64], tau_st: &BTreeMap<u32, f64>) -> PredictionSet {
    let masks = pred
        .segments
        .iter()
        .map(|seg| match tau_st.get(&seg.class) {
            Some(&tau) if pred.registry.is_stuff(seg.class) => {
                PointMask::from_indices(seg.mask.len(), seg.mask.iter().filter(|&i| s[i] >= tau && s[i] > 0.0))
            }
            _ => seg.mask.clone(),
        })
        .collect();
    pred.with_masks(masks)
}

/// Index of the candidate with the highest IoU against `mask` if that IoU is
/// at least `iou_min`. Ties go to the lower index.
pub fn best_match<'a>(
    mask: &PointMask,
    candidates: impl IntoIterator<Item = &'a PointMask>,
    iou_min: f64,
) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in candidates.into_iter().enumerate() {
        let iou = mask_iou(mask, g)?;
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((j, iou));
        }
    }
    Ok(best.filter(|&(_, iou)| iou >= iou_min && iou > 0.0))
}

/// Merges every stuff mask with its best-matching geometric superpoint
/// (clusters, then the ground region) when the IoU reaches `iou_min`.
pub fn grow_stuff(pred: &PredictionSet, geo: &GeometricSuperpoints, iou_min: f64) -> Result<PredictionSet> {
    let candidates = geo.candidates();
    let mut masks = Vec::with_capacity(pred.segments.len());
    for seg in &pred.segments {
        let mut m = seg.mask.clone();
        if pred.registry.is_stuff(seg.class) && !m.is_empty() {
            if let Some((j, _)) = best_match(&m, candidates.iter().copied(), iou_min)? {
                m.union_with(candidates[j])?;
            }
        }
        masks.push(m);
    }
    Ok(pred.with_masks(masks))
}

/// Makes masks disjoint: stuff beats thing; between two stuff (or two thing)
/// masks the higher `sbar` wins, ties to the lower index.
pub fn resolve_conflicts(pred: &PredictionSet, sbar: &[f64]) -> PredictionSet {
    let n = pred.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let rank = |k: usize| (pred.registry.is_stuff(pred.segments[k].class), sbar[k]);
    for (k, seg) in pred.segments.iter().enumerate() {
        for i in seg.mask.iter() {
            owner[i] = match owner[i] {
                None => Some(k),
                Some(o) => {
                    let (so, vo) = rank(o);
                    let (sk, vk) = rank(k);
                    if sk && !so || (sk == so && vk > vo) {
                        Some(k)
                    } else {
                        Some(o)
                    }
                }
            };
        }
    }
    let mut masks = vec![PointMask::new(n); pred.segments.len()];
    for (i, o) in owner.into_iter().enumerate() {
        if let Some(k) = o {
            masks[k].insert(i);
        }
    }
    pred.with_masks(masks)
}

/// Min-max normalization of `sbar` over the segments flagged `alive`.
/// A zero range maps every alive segment to 1; dead segments get 0.
pub fn normalize_scores(sbar: &[f64], alive: &[bool]) -> Vec<f64> {
    let live = sbar.iter().zip(alive).filter(|(_, &a)| a).map(|(&v, _)| v);
    let (lo, hi) = live.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    sbar.iter()
        .zip(alive)
        .map(|(&v, &a)| match (a, hi - lo > 1e-12) {
            (false, _) => 0.0,
            (true, true) => (v - lo) / (hi - lo),
            (true, false) => 1.0,
        })
        .collect()
}

/// Relabels thing segments from their best-matching visual superpoint when
/// the normalized score is below `min(S_Q, t_cls)`. Masks are unchanged.
pub fn reassign_classes(
    pred: &PredictionSet,
    vis: &VisualSuperpoints,
    sbar_norm: &[f64],
    t_cls: f64,
    iou_min: f64,
) -> Result<PseudoLabelSet> {
    let mut classes = Vec::with_capacity(pred.segments.len());
    for (k, seg) in pred.segments.iter().enumerate() {
        let mut c = seg.class;
        if pred.is_thing(k) && !seg.mask.is_empty() {
            if let Some((j, _)) = best_match(&seg.mask, vis.items.iter().map(|q| &q.mask), iou_min)? {
                let q = &vis.items[j];
                if sbar_norm[k] < q.confidence.min(t_cls) && pred.registry.get(q.label).is_some() && q.label != 0 {
                    c = q.label;
                }
            }
        }
        classes.push(c);
    }
    let masks: Vec<PointMask> = pred.segments.iter().map(|s| s.mask.clone()).collect();
    let mut weights = vec![0.0; pred.len()];
    for m in &masks {
        for i in m.iter() {
            weights[i] = 1.0;
        }
    }
    Ok(PseudoLabelSet {
        classes,
        masks,
        weights,
        scores_norm: sbar_norm.to_vec(),
        registry: pred.registry.clone(),
    })
}

/// Confidence filtering only, without superpoint refinement.
pub fn filter_only(teacher: &PredictionSet, th: &Thresholds) -> Result<PseudoLabelSet> {
    th.validate()?;
    let joint = joint_confidence(teacher);
    let sbar = instance_mean_confidence(teacher, &joint);
    let after_things = filter_things(teacher, &sbar, th.tau_th);
    let tau_st = compute_stuff_thresholds(&joint, &after_things, th.stuff_keep_fraction);
    let after_stuff = filter_stuff(&after_things, &joint, &tau_st);
    let norm = vec![1.0; after_stuff.segments.len()];
    reassign_classes(&after_stuff, &VisualSuperpoints::default(), &norm, th.t_cls, th.iou_min)
}

/// Intermediate results of [`refine_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    pub joint: Vec<f64>,
    pub sbar: Vec<f64>,
    pub after_things: PredictionSet,
    pub tau_st: BTreeMap<u32, f64>,
    pub after_stuff: PredictionSet,
    /// Mean confidence over the filtered masks (used for conflicts and normalization).
    pub sbar_filtered: Vec<f64>,
    pub grown: PredictionSet,
    pub resolved: PredictionSet,
}

/// Full refinement chain; see [`refine_traced`] for the intermediate stages.
pub fn refine(
    teacher: &PredictionSet,
    geo: &GeometricSuperpoints,
    vis: &VisualSuperpoints,
    th: &Thresholds,
) -> Result<PseudoLabelSet> {
    refine_traced(teacher, geo, vis, th).map(|(out, _)| out)
}

pub fn refine_traced(
    teacher: &PredictionSet,
    geo: &GeometricSuperpoints,
    vis: &VisualSuperpoints,
    th: &Thresholds,
) -> Result<(PseudoLabelSet, RefineTrace)> {
    th.validate()?;
    let n = teacher.len();
    if geo.ground.len() != n || geo.clusters.iter().any(|c| c.len() != n) {
        return Err(shape_err("geometric superpoints do not match the prediction"));
    }
    if vis.items.iter().any(|q| q.mask.len() != n) {
        return Err(shape_err("visual superpoints do not match the prediction"));
    }
    let joint = joint_confidence(teacher);
    let sbar = instance_mean_confidence(teacher, &joint);
    let after_things = filter_things(teacher, &sbar, th.tau_th);
    let tau_st = compute_stuff_thresholds(&joint, &after_things, th.stuff_keep_fraction);
    let after_stuff = filter_stuff(&after_things, &joint, &tau_st);
    let sbar_filtered = instance_mean_confidence(&after_stuff, &joint);
    let grown = grow_stuff(&after_stuff, geo, th.iou_min)?;
    let resolved = resolve_conflicts(&grown, &sbar_filtered);
    let alive: Vec<bool> = after_stuff.segments.iter().map(|s| !s.mask.is_empty()).collect();
    let sbar_norm = normalize_scores(&sbar_filtered, &alive);
    let out = reassign_classes(&resolved, vis, &sbar_norm, th.t_cls, th.iou_min)?;
    Ok((
        out,
        RefineTrace {
            joint,
            sbar,
            after_things,
            tau_st,
            after_stuff,
            sbar_filtered,
            grown,
            resolved,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superpoints::VisualSuperpoint;
    use proptest::prelude::*;

    fn reg() -> Arc<ClassRegistry> {
        Arc::new(ClassRegistry::default())
    }

    fn seg(class: u32, score: f64, n: usize, idx: impl IntoIterator<Item = usize>) -> Segment {
        Segment {
            class,
            score,
            mask: PointMask::from_indices(n, idx),
        }
    }

    #[test]
    fn joint_confidence_examples() {
        let n = 4;
        let p = PredictionSet::new(
            vec![seg(3, 0.9, n, [0]), seg(1, 1.0, n, [1])],
            vec![0.7, 1.0, 1.0, 0.3],
            reg(),
        )
        .unwrap();
        let s = joint_confidence(&p);
        assert!((s[0] - 0.63).abs() < 1e-12);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn instance_mean_examples() {
        let n = 3;
        let p = PredictionSet::new(
            vec![seg(3, 1.0, n, [0, 1]), seg(4, 1.0, n, [])],
            vec![0.9, 0.4, 1.0],
            reg(),
        )
        .unwrap();
        let s = joint_confidence(&p);
        let m = instance_mean_confidence(&p, &s);
        assert!((m[0] - 0.65).abs() < 1e-12);
        assert_eq!(m[1], 0.0);
    }

    #[test]
    fn overlapping_masks_rejected() {
        let n = 3;
        let r = PredictionSet::new(vec![seg(3, 1.0, n, [0, 1]), seg(4, 1.0, n, [1])], vec![1.0; n], reg());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn thing_filter_is_inclusive_and_whole() {
        let n = 6;
        let p = PredictionSet::new(
            vec![seg(3, 1.0, n, [0, 1]), seg(4, 1.0, n, [2, 3]), seg(5, 1.0, n, [4, 5])],
            vec![1.0; n],
            reg(),
        )
        .unwrap();
        let out = filter_things(&p, &[0.70, 0.50, 0.63], 0.63);
        assert_eq!(out.segments[0].mask.count(), 2);
        assert!(out.segments[1].mask.is_empty());
        assert_eq!(out.segments[2].mask.count(), 2);
    }

    #[test]
    fn stuff_threshold_keeps_top_eighty_percent() {
        let n = 10;
        let p = PredictionSet::new(vec![seg(1, 1.0, n, 0..10)], vec![1.0; n], reg()).unwrap();
        let s: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let tau = compute_stuff_thresholds(&s, &p, 0.8);
        assert!((tau[&1] - 0.3).abs() < 1e-12);
        assert_eq!(tau[&2], 1.0);
        let out = filter_stuff(&p, &s, &tau);
        assert_eq!(out.segments[0].mask.iter().collect::<Vec<_>>(), (2..10).collect::<Vec<_>>());
        let all = compute_stuff_thresholds(&s, &p, 1.0);
        assert!((all[&1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stuff_filter_extremes() {
        let n = 4;
        let p = PredictionSet::new(vec![seg(2, 1.0, n, 0..4)], vec![0.5; n], reg()).unwrap();
        let s = joint_confidence(&p);
        let zero: BTreeMap<u32, f64> = [(1, 0.0), (2, 0.0)].into();
        assert_eq!(filter_stuff(&p, &s, &zero), p);
        let one: BTreeMap<u32, f64> = [(1, 1.0), (2, 1.0)].into();
        assert!(filter_stuff(&p, &s, &one).segments[0].mask.is_empty());
    }

    fn geo(n: usize, clusters: Vec<Vec<usize>>) -> GeometricSuperpoints {
        GeometricSuperpoints {
            ground: PointMask::new(n),
            clusters: clusters.into_iter().map(|c| PointMask::from_indices(n, c)).collect(),
        }
    }

    #[test]
    fn grow_merges_the_forty_sixty_case() {
        // Stuff mask of 40, superpoint of 60, 35 shared: IoU 35/65.
        let n = 100;
        let p = PredictionSet::new(vec![seg(1, 1.0, n, 0..40)], vec![1.0; n], reg()).unwrap();
        let g = geo(n, vec![(5..65).collect()]);
        let out = grow_stuff(&p, &g, 0.5).unwrap();
        assert_eq!(out.segments[0].mask.count(), 65);
    }

    #[test]
    fn grow_needs_enough_overlap_and_takes_the_best() {
        let n = 100;
        let p = PredictionSet::new(vec![seg(1, 1.0, n, 0..40)], vec![1.0; n], reg()).unwrap();
        // IoU 20/50 = 0.4.
        let weak = geo(n, vec![(20..50).collect()]);
        assert_eq!(grow_stuff(&p, &weak, 0.5).unwrap(), p);
        // IoU 0.55 (22/40) vs 0.6 (30/50): the second wins.
        let two = geo(n, vec![(0..22).collect(), (10..50).collect()]);
        let out = grow_stuff(&p, &two, 0.5).unwrap();
        assert_eq!(out.segments[0].mask.iter().collect::<Vec<_>>(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn grow_leaves_things_alone() {
        let n = 20;
        let p = PredictionSet::new(vec![seg(3, 1.0, n, 0..8)], vec![1.0; n], reg()).unwrap();
        let g = geo(n, vec![(0..10).collect()]);
        assert_eq!(grow_stuff(&p, &g, 0.5).unwrap(), p);
    }

    #[test]
    fn conflicts_prefer_stuff() {
        let n = 20;
        let mut p = PredictionSet::new(vec![seg(1, 1.0, n, 0..10), seg(3, 1.0, n, 10..20)], vec![1.0; n], reg()).unwrap();
        p.segments[0].mask.union_with(&PointMask::from_indices(n, 10..15)).unwrap();
        let out = resolve_conflicts(&p, &[0.5, 0.9]);
        assert_eq!(out.segments[0].mask.count(), 15);
        assert_eq!(out.segments[1].mask.iter().collect::<Vec<_>>(), (15..20).collect::<Vec<_>>());

        p.segments[0].mask = PointMask::full(n);
        let out = resolve_conflicts(&p, &[0.5, 0.9]);
        assert!(out.segments[1].mask.is_empty());

        let q = PredictionSet::new(vec![seg(1, 1.0, n, 0..10), seg(3, 1.0, n, 10..20)], vec![1.0; n], reg()).unwrap();
        assert_eq!(resolve_conflicts(&q, &[0.1, 0.1]), q);
    }

    #[test]
    fn stuff_stuff_conflict_goes_to_higher_mean() {
        let n = 10;
        let mut p = PredictionSet::new(vec![seg(1, 1.0, n, 0..5), seg(2, 1.0, n, 5..10)], vec![1.0; n], reg()).unwrap();
        p.segments[0].mask = PointMask::from_indices(n, 0..8);
        let out = resolve_conflicts(&p, &[0.4, 0.8]);
        assert_eq!(out.segments[0].mask.count(), 5);
        assert_eq!(out.segments[1].mask.count(), 5);
    }

    #[test]
    fn normalization() {
        let v = normalize_scores(&[0.7, 0.9, 0.8, 0.1], &[true, true, true, false]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-9);
        assert_eq!(v[3], 0.0);
        assert_eq!(normalize_scores(&[0.4, 0.4], &[true, true]), vec![1.0, 1.0]);
    }

    fn vis(n: usize, idx: impl IntoIterator<Item = usize>, label: u32, conf: f64) -> VisualSuperpoints {
        VisualSuperpoints {
            items: vec![VisualSuperpoint {
                mask: PointMask::from_indices(n, idx),
                label,
                confidence: conf,
            }],
        }
    }

    #[test]
    fn reassignment_rule() {
        let n = 10;
        let p = PredictionSet::new(vec![seg(3, 1.0, n, 0..5)], vec![1.0; n], reg()).unwrap();
        let q = vis(n, 0..5, 4, 0.5);
        assert_eq!(reassign_classes(&p, &q, &[0.1], 0.2, 0.5).unwrap().classes, vec![4]);
        assert_eq!(reassign_classes(&p, &q, &[0.3], 0.2, 0.5).unwrap().classes, vec![3]);
        // Proposal confidence bounds the rule too: min(0.05, 0.2) = 0.05.
        let low = vis(n, 0..5, 4, 0.05);
        assert_eq!(reassign_classes(&p, &low, &[0.1], 0.2, 0.5).unwrap().classes, vec![3]);
        // IoU 2/8 < 0.5.
        let miss = vis(n, 3..8, 4, 0.9);
        assert_eq!(reassign_classes(&p, &miss, &[0.0], 0.2, 0.5).unwrap().classes, vec![3]);
    }

    fn gt_labels() -> PanopticLabeling {
        // 0..40 ground, 40..60 wall, 60..70 box #1, 70..80 sphere #1, 80..90 box #2, 90..100 ignore.
        let ids = (0..100)
            .map(|i| match i {
                0..40 => 1000,
                40..60 => 2000,
                60..70 => 3001,
                70..80 => 5001,
                80..90 => 3002,
                _ => 0,
            })
            .collect();
        PanopticLabeling::new(ids, reg()).unwrap()
    }

    fn oracle_geo(labels: &PanopticLabeling) -> GeometricSuperpoints {
        let segs = labels.segments();
        GeometricSuperpoints {
            ground: segs[&1000].clone(),
            clusters: segs.iter().filter(|(&id, _)| id != 1000).map(|(_, m)| m.clone()).collect(),
        }
    }

    #[test]
    fn gt_teacher_round_trips() {
        let gt = gt_labels();
        let p = PredictionSet::from_labeling(&gt, 1.0, 1.0).unwrap();
        let out = refine(&p, &oracle_geo(&gt), &VisualSuperpoints::default(), &Thresholds::default()).unwrap();
        assert_eq!(out.to_labeling().unwrap(), gt);
        let covered = out.weights.iter().filter(|&&w| w == 1.0).count();
        assert_eq!(covered, 90);
    }

    #[test]
    fn zero_confidence_removes_everything() {
        let gt = gt_labels();
        let p = PredictionSet::from_labeling(&gt, 0.0, 0.0).unwrap();
        let out = refine(&p, &oracle_geo(&gt), &VisualSuperpoints::default(), &Thresholds::default()).unwrap();
        assert!(out.masks.iter().all(PointMask::is_empty));
        assert!(out.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn corrupted_teacher_is_repaired() {
        let gt = gt_labels();
        let mut p = PredictionSet::from_labeling(&gt, 0.95, 1.0).unwrap();
        // Drop every fifth ground point, flip box #2 to cylinder with a lower score.
        let k_ground = p.segments.iter().position(|s| s.class == 1).unwrap();
        for i in (0..40).step_by(5) {
            p.segments[k_ground].mask.remove(i);
        }
        let k_flip = p.segments.iter().position(|s| s.mask.contains(80)).unwrap();
        p.segments[k_flip].class = 4;
        p.segments[k_flip].score = 0.7;
        let q = vis(100, 80..90, 3, 0.8);
        let out = refine(&p, &oracle_geo(&gt), &q, &Thresholds::default()).unwrap();
        assert_eq!(out.to_labeling().unwrap(), gt);
    }

    fn random_prediction(seed: u64, n: usize) -> (PredictionSet, GeometricSuperpoints, VisualSuperpoints) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut owner = vec![None; n];
        let k = rng.gen_range(1..7);
        for o in owner.iter_mut() {
            if rng.gen::<f64>() < 0.85 {
                *o = Some(rng.gen_range(0..k));
            }
        }
        let segments = (0..k)
            .map(|j| Segment {
                class: if j < 2 { j as u32 + 1 } else { rng.gen_range(1..6) },
                score: rng.gen(),
                mask: PointMask::from_fn(n, |i| owner[i] == Some(j)),
            })
            .collect::<Vec<_>>();
        // Stuff is one segment per class: relabel duplicate stuff segments as things.
        let mut seen = std::collections::BTreeSet::new();
        let segments = segments
            .into_iter()
            .map(|mut s| {
                if s.class <= 2 && !seen.insert(s.class) {
                    s.class = 3;
                }
                s
            })
            .collect();
        let conf = (0..n).map(|_| rng.gen()).collect();
        let pred = PredictionSet::new(segments, conf, reg()).unwrap();
        let g = GeometricSuperpoints {
            ground: PointMask::from_fn(n, |_| rng.gen::<f64>() < 0.3),
            clusters: (0..rng.gen_range(0..5))
                .map(|_| {
                    let a = rng.gen_range(0..n);
                    let b = rng.gen_range(a..=n);
                    PointMask::from_indices(n, a..b)
                })
                .collect(),
        };
        let v = VisualSuperpoints {
            items: (0..rng.gen_range(0..4))
                .map(|_| {
                    let a = rng.gen_range(0..n);
                    let b = rng.gen_range(a..=n);
                    VisualSuperpoint {
                        mask: PointMask::from_indices(n, a..b),
                        label: rng.gen_range(3..6),
                        confidence: rng.gen(),
                    }
                })
                .collect(),
        };
        (pred, g, v)
    }

    proptest! {
        #[test]
        fn pipeline_invariants(seed in any::<u64>(), n in 1usize..120) {
            let (pred, g, v) = random_prediction(seed, n);
            let th = Thresholds { stuff_keep_fraction: 0.6, ..Thresholds::default() };
            let (out, tr) = refine_traced(&pred, &g, &v, &th).unwrap();
            for k in 0..pred.segments.len() {
                prop_assert!(tr.after_things.segments[k].mask.is_subset_of(&pred.segments[k].mask).unwrap());
                prop_assert!(tr.after_stuff.segments[k].mask.is_subset_of(&tr.after_things.segments[k].mask).unwrap());
                prop_assert!(tr.after_stuff.segments[k].mask.is_subset_of(&tr.grown.segments[k].mask).unwrap());
                prop_assert_eq!(&out.masks[k], &tr.resolved.segments[k].mask);
            }
            let mut seen = PointMask::new(n);
            for m in &out.masks {
                prop_assert!(seen.is_disjoint(m).unwrap());
                seen.union_with(m).unwrap();
            }
            for i in 0..n {
                prop_assert_eq!(out.weights[i] == 0.0, !seen.contains(i));
            }
        }

        #[test]
        fn refine_is_idempotent_with_unit_confidence(seed in any::<u64>(), n in 1usize..80) {
            let (pred, g, v) = random_prediction(seed, n);
            let th = Thresholds::default();
            let first = refine(&pred, &g, &v, &th).unwrap();
            let segs = first.classes.iter().zip(&first.masks)
                .filter(|(_, m)| !m.is_empty())
                .map(|(&class, m)| Segment { class, score: 1.0, mask: m.clone() })
                .collect();
            let again = PredictionSet::new(segs, vec![1.0; n], reg()).unwrap();
            let second = refine(&again, &g, &v, &th).unwrap();
            let second_again = {
                let segs = second.classes.iter().zip(&second.masks)
                    .filter(|(_, m)| !m.is_empty())
                    .map(|(&class, m)| Segment { class, score: 1.0, mask: m.clone() })
                    .collect();
                PredictionSet::new(segs, vec![1.0; n], reg()).unwrap()
            };
            let third = refine(&second_again, &g, &v, &th).unwrap();
            prop_assert_eq!(second.point_classes(), third.point_classes());
        }
    }
}
