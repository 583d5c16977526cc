//! Panoptic quality with thing/stuff splits, mean IoU, and per-point error maps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{shape_err, Result};
use crate::panoptic::{PanopticLabeling, IGNORE_ID, INSTANCE_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }

    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Matching state of one or more frames. Merging is associative and
/// order-independent up to float summation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matches {
    pub per_class: BTreeMap<u32, ClassCounts>,
    /// `(pred id, gt id, IoU)` of the true positives of the last matched frame.
    pub pairs: Vec<(u32, u32, f64)>,
    /// Point counts keyed by `(gt class, pred class)`, ignore points excluded.
    pub confusion: BTreeMap<(u32, u32), u64>,
}

impl Matches {
    pub fn merge(&mut self, other: &Matches) {
        for (c, k) in &other.per_class {
            self.per_class.entry(*c).or_default().add(k);
        }
        for (key, n) in &other.confusion {
            *self.confusion.entry(*key).or_default() += n;
        }
        self.pairs.extend_from_slice(&other.pairs);
    }
}

/// Standard panoptic matching: same-class pairs with IoU > 0.5 are true
/// positives. Points whose ground truth is the ignore id are removed first.
pub fn match_segments(pred: &PanopticLabeling, gt: &PanopticLabeling) -> Result<Matches> {
    if pred.len() != gt.len() {
        return Err(shape_err(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut confusion: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if g == IGNORE_ID {
            continue;
        }
        *gt_area.entry(g).or_default() += 1;
        *confusion.entry((g / INSTANCE_BASE, p / INSTANCE_BASE)).or_default() += 1;
        if p != IGNORE_ID {
            *pred_area.entry(p).or_default() += 1;
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut per_class: BTreeMap<u32, ClassCounts> = BTreeMap::new();
    let mut pred_matched: BTreeMap<u32, bool> = pred_area.keys().map(|&k| (k, false)).collect();
    let mut gt_matched: BTreeMap<u32, bool> = gt_area.keys().map(|&k| (k, false)).collect();
    let mut keys: Vec<_> = inter.into_iter().collect();
    keys.sort_unstable();
    let mut pairs = Vec::new();
    for ((p, g), n) in keys {
        if p / INSTANCE_BASE != g / INSTANCE_BASE {
            continue;
        }
        let union = pred_area[&p] + gt_area[&g] - n;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            assert!(
                !pred_matched[&p] && !gt_matched[&g],
                "IoU > 0.5 matched a segment twice"
            );
            pred_matched.insert(p, true);
            gt_matched.insert(g, true);
            let c = per_class.entry(g / INSTANCE_BASE).or_default();
            c.tp += 1;
            c.iou_sum += iou;
            pairs.push((p, g, iou));
        }
    }
    for (p, m) in pred_matched {
        if !m {
            per_class.entry(p / INSTANCE_BASE).or_default().fp += 1;
        }
    }
    for (g, m) in gt_matched {
        if !m {
            per_class.entry(g / INSTANCE_BASE).or_default().fn_ += 1;
        }
    }
    Ok(Matches {
        per_class,
        pairs,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: u32,
    pub name: String,
    pub thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: f64,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub miou: f64,
    pub classes: Vec<ClassRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class IoU from the confusion counts, for classes present in gt or pred.
pub fn class_ious(confusion: &BTreeMap<(u32, u32), u64>) -> BTreeMap<u32, f64> {
    let mut tp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gt_n: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_n: BTreeMap<u32, u64> = BTreeMap::new();
    for (&(g, p), &n) in confusion {
        *gt_n.entry(g).or_default() += n;
        if p != 0 {
            *pred_n.entry(p).or_default() += n;
        }
        if g == p {
            *tp.entry(g).or_default() += n;
        }
    }
    let classes: std::collections::BTreeSet<u32> = gt_n.keys().chain(pred_n.keys()).copied().collect();
    classes
        .into_iter()
        .map(|c| {
            let t = tp.get(&c).copied().unwrap_or(0);
            let u = gt_n.get(&c).copied().unwrap_or(0) + pred_n.get(&c).copied().unwrap_or(0) - t;
            (c, if u == 0 { 0.0 } else { t as f64 / u as f64 })
        })
        .collect()
}

/// Unweighted mean IoU over semantic classes present in `gt` or `pred`.
/// Points labeled 0 in `gt` are ignored.
pub fn mean_iou(pred_sem: &[u32], gt_sem: &[u32]) -> Result<f64> {
    if pred_sem.len() != gt_sem.len() {
        return Err(shape_err("semantic label lengths differ"));
    }
    let mut confusion = BTreeMap::new();
    for (&p, &g) in pred_sem.iter().zip(gt_sem) {
        if g != 0 {
            *confusion.entry((g, p)).or_insert(0u64) += 1;
        }
    }
    Ok(mean(class_ious(&confusion).into_values()))
}

/// PQ = SQ * RQ per class; dataset values are unweighted means over classes
/// with at least one gt or pred segment.
pub fn panoptic_quality(matches: &Matches, registry: &crate::panoptic::ClassRegistry) -> PanopticReport {
    let ious = class_ious(&matches.confusion);
    let classes: Vec<ClassRow> = matches
        .per_class
        .iter()
        .filter(|(_, k)| !k.is_empty())
        .map(|(&c, k)| ClassRow {
            class: c,
            name: registry.name(c).to_string(),
            thing: registry.is_thing(c),
            pq: k.pq(),
            sq: k.sq(),
            rq: k.rq(),
            iou: ious.get(&c).copied().unwrap_or(0.0),
            counts: *k,
        })
        .collect();
    PanopticReport {
        pq: mean(classes.iter().map(|r| r.pq)),
        sq: mean(classes.iter().map(|r| r.sq)),
        rq: mean(classes.iter().map(|r| r.rq)),
        pq_th: mean(classes.iter().filter(|r| r.thing).map(|r| r.pq)),
        pq_st: mean(classes.iter().filter(|r| !r.thing).map(|r| r.pq)),
        miou: mean(ious.into_values()),
        classes,
    }
}

/// Matches every frame and reduces the results.
pub fn evaluate<'a>(
    frames: impl IntoIterator<Item = (&'a PanopticLabeling, &'a PanopticLabeling)>,
) -> Result<Option<PanopticReport>> {
    let mut acc = Matches::default();
    let mut registry = None;
    for (pred, gt) in frames {
        acc.merge(&match_segments(pred, gt)?);
        registry.get_or_insert_with(|| gt.registry().clone());
    }
    Ok(registry.map(|r| panoptic_quality(&acc, &r)))
}

impl PanopticReport {
    /// Aligned plain-text table, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5}", "class", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN");
        for r in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>5} {:>5} {:>5}",
                r.name,
                100.0 * r.pq,
                100.0 * r.sq,
                100.0 * r.rq,
                100.0 * r.iou,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_
            );
        }
        let _ = writeln!(
            s,
            "PQ {:.2}  PQ^th {:.2}  PQ^st {:.2}  SQ {:.2}  RQ {:.2}  mIoU {:.2}",
            100.0 * self.pq,
            100.0 * self.pq_th,
            100.0 * self.pq_st,
            100.0 * self.sq,
            100.0 * self.rq,
            100.0 * self.miou
        );
        s
    }

    /// `key=value` lines with fractions in [0, 1].
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("PQ", self.pq),
            ("SQ", self.sq),
            ("RQ", self.rq),
            ("PQ_th", self.pq_th),
            ("PQ_st", self.pq_st),
            ("mIoU", self.miou),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        for r in &self.classes {
            let _ = writeln!(
                s,
                "class.{n}.PQ={:.6}\nclass.{n}.SQ={:.6}\nclass.{n}.RQ={:.6}\nclass.{n}.IoU={:.6}\nclass.{n}.TP={}\nclass.{n}.FP={}\nclass.{n}.FN={}",
                r.pq,
                r.sq,
                r.rq,
                r.iou,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                n = r.name
            );
        }
        s
    }
}

pub const COLOR_FALSE_POSITIVE: [u8; 3] = [255, 0, 0];
pub const COLOR_FALSE_NEGATIVE: [u8; 3] = [54, 118, 33];
pub const COLOR_CORRECT: [u8; 3] = [169, 169, 169];
pub const COLOR_MISMATCH: [u8; 3] = [0, 0, 255];

/// Per-point error colors. In order: ignored gt is gray; points of a matched
/// pred segment are gray when they belong to its gt partner and blue
/// otherwise; points of unmatched pred segments are red; unpredicted points
/// are blue when their gt segment was matched and green otherwise.
pub fn error_map_colors(pred: &PanopticLabeling, gt: &PanopticLabeling) -> Result<Vec<[u8; 3]>> {
    let m = match_segments(pred, gt)?;
    let pred_to_gt: HashMap<u32, u32> = m.pairs.iter().map(|&(p, g, _)| (p, g)).collect();
    let gt_matched: std::collections::HashSet<u32> = m.pairs.iter().map(|&(_, g, _)| g).collect();
    Ok(pred
        .ids()
        .iter()
        .zip(gt.ids())
        .map(|(&p, &g)| {
            if g == IGNORE_ID {
                COLOR_CORRECT
            } else if p != IGNORE_ID {
                match pred_to_gt.get(&p) {
                    Some(&partner) if partner == g => COLOR_CORRECT,
                    Some(_) => COLOR_MISMATCH,
                    None => COLOR_FALSE_POSITIVE,
                }
            } else if gt_matched.contains(&g) {
                COLOR_MISMATCH
            } else {
                COLOR_FALSE_NEGATIVE
            }
        })
        .collect())
}
