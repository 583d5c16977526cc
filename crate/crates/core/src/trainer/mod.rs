//! Source pretraining and mean-teacher adaptation of the toy model.

mod model;

pub use model::{
    aux_grad, aux_loss, consistency_loss, derive_instances, ema_update, forward, forward_aux, lr_at,
    point_inputs, point_terms_grad, point_terms_grad_with, seg_loss, total_loss, Forward, ModelShape,
    PointInputs, PointTerms, ToyModel, DENSITY_RADIUS, LIDAR_INPUTS, NUM_INPUTS, RGB_INPUTS,
};

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amd::{amd_apply_with, BoundaryAnalysis, DropRatios, Modality};
use crate::camera::project_points;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{match_segments, panoptic_quality, Matches, PanopticReport};
use crate::panoptic::{ClassRegistry, PanopticLabeling};
use crate::pseudolabel::{filter_only, refine, PredictionSet, PseudoLabelSet, Thresholds};
use crate::superpoints::{
    extract_geometric_superpoints, lift_visual_masks, ClusterParams, Dbscan, GeometricSuperpoints,
    Proposal2d, RansacParams, VisualSuperpoints,
};
use crate::synth::{derive_seed, oracle_proposals, OracleParams};
use crate::voxel::GridSpec;

/// How target pseudo-labels are produced from teacher predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineMode {
    /// Filtering, Grow and class reassignment.
    Full,
    /// Confidence filtering only.
    FilterOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub pretrain_iterations: usize,
    /// Adaptation length in passes over the target set.
    pub epochs: usize,
    /// Fixed adaptation length; overrides `epochs` when set.
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub ema_momentum: f64,
    /// Evaluate the teacher every this many adaptation iterations (0: only at the end).
    pub eval_interval: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub ratios: DropRatios,
    pub use_amd: bool,
    pub refine: RefineMode,
    pub cluster: ClusterParams,
    pub ransac: RansacParams,
    pub oracle: OracleParams,
    pub grid: GridSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 16,
            lr: 0.2,
            pretrain_iterations: 500,
            epochs: 5,
            iterations: None,
            batch_size: 1,
            ema_momentum: 0.99,
            eval_interval: 0,
            seed: 0,
            thresholds: Thresholds::default(),
            ratios: DropRatios::default(),
            use_amd: true,
            refine: RefineMode::Full,
            cluster: ClusterParams::default(),
            ransac: RansacParams::default(),
            oracle: OracleParams::default(),
            grid: GridSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema momentum {} outside [0, 1)", self.ema_momentum)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden size and batch size must be positive".into()));
        }
        self.thresholds.validate()?;
        self.ratios.validate()?;
        self.cluster.validate()?;
        self.ransac.validate()?;
        self.grid.validate()
    }

    /// Mean-teacher ablation: no drop augmentation, filtering-only pseudo-labels.
    pub fn mean_teacher_only(&self) -> Self {
        TrainConfig {
            use_amd: false,
            refine: RefineMode::FilterOnly,
            ..self.clone()
        }
    }

    pub fn adapt_iterations(&self, target_len: usize) -> usize {
        self.iterations
            .unwrap_or_else(|| self.epochs * target_len.div_ceil(self.batch_size))
    }
}

fn semantic_targets(labels: &PanopticLabeling) -> (Vec<usize>, Vec<f64>) {
    labels
        .ids()
        .iter()
        .map(|&id| {
            let c = id / crate::panoptic::INSTANCE_BASE;
            if c == 0 {
                (0, 0.0)
            } else {
                (c as usize - 1, 1.0)
            }
        })
        .unzip()
}

/// A labeled source frame with cached inputs, drop candidates and 2D supervision.
#[derive(Debug, Clone)]
pub struct SourceItem {
    pub frame: Frame,
    pub inputs: PointInputs,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    /// Pixels hit by at least one labeled projection, with the class index of
    /// the nearest such point.
    pub aux_pixels: Vec<usize>,
    pub aux_labels: Vec<usize>,
    pub analysis: Option<BoundaryAnalysis>,
}

/// Pixel supervision from projected labels: nearest point by depth wins.
pub fn aux_targets(frame: &Frame) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = frame.labels()?;
    let (w, h) = (frame.image.width(), frame.image.height());
    let mut best: std::collections::BTreeMap<usize, (f64, u32)> = Default::default();
    for (i, p) in project_points(&frame.cloud, &frame.calib, w, h).iter().enumerate() {
        if let Some((x, y)) = p.pixel() {
            let e = best.entry(y * w + x).or_insert((f64::INFINITY, 0));
            if p.depth < e.0 {
                *e = (p.depth, labels.class_of(i));
            }
        }
    }
    Ok(best
        .into_iter()
        .filter(|(_, (_, c))| *c != 0)
        .map(|(px, (_, c))| (px, c as usize - 1))
        .unzip())
}

pub fn prepare_source(frame: Frame, cfg: &TrainConfig) -> Result<SourceItem> {
    let inputs = point_inputs(&frame)?;
    let (labels, weights) = semantic_targets(frame.labels()?);
    let (aux_pixels, aux_labels) = aux_targets(&frame)?;
    let analysis = if cfg.use_amd {
        Some(BoundaryAnalysis::compute(&frame, &cfg.ratios, &cfg.grid)?)
    } else {
        None
    };
    Ok(SourceItem {
        frame,
        inputs,
        labels,
        weights,
        aux_pixels,
        aux_labels,
        analysis,
    })
}

/// An unlabeled target frame with cached inputs and superpoints. The image is
/// not kept once the inputs are computed.
#[derive(Debug, Clone)]
pub struct TargetItem {
    pub positions: Vec<[f64; 3]>,
    pub inputs: PointInputs,
    pub geo: GeometricSuperpoints,
    pub vis: VisualSuperpoints,
}

pub fn prepare_target(frame: &Frame, proposals: &[Proposal2d], cfg: &TrainConfig) -> Result<TargetItem> {
    let inputs = point_inputs(frame)?;
    let geo = extract_geometric_superpoints(&frame.cloud, &cfg.ransac, &Dbscan(cfg.cluster))?;
    let vis = lift_visual_masks(proposals, frame)?;
    Ok(TargetItem {
        positions: frame.cloud.positions().to_vec(),
        inputs,
        geo,
        vis,
    })
}

/// Target item with stand-in 2D proposals derived from the frame's labels.
pub fn prepare_target_oracle(frame: &Frame, cfg: &TrainConfig, seed: u64) -> Result<TargetItem> {
    let proposals = oracle_proposals(frame, &cfg.oracle, seed)?;
    prepare_target(frame, &proposals, cfg)
}

/// A labeled evaluation frame.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub positions: Vec<[f64; 3]>,
    pub inputs: PointInputs,
    pub labels: PanopticLabeling,
}

pub fn prepare_eval(frame: &Frame) -> Result<EvalItem> {
    Ok(EvalItem {
        positions: frame.cloud.positions().to_vec(),
        inputs: point_inputs(frame)?,
        labels: frame.labels()?.clone(),
    })
}

/// Teacher/student inference: forward pass followed by instance derivation.
pub fn predict(
    model: &ToyModel,
    inputs: &PointInputs,
    positions: &[[f64; 3]],
    cluster: &ClusterParams,
    registry: &Arc<ClassRegistry>,
) -> Result<(Forward, PredictionSet)> {
    let fw = forward(model, inputs)?;
    let pred = derive_instances(&fw.probs, positions, cluster, registry.clone())?;
    Ok((fw, pred))
}

pub fn evaluate_model(model: &ToyModel, items: &[EvalItem], cluster: &ClusterParams) -> Result<PanopticReport> {
    let registry = items
        .first()
        .map(|e| e.labels.registry().clone())
        .ok_or_else(|| Error::Precondition("evaluation set is empty".into()))?;
    let mut acc = Matches::default();
    for item in items {
        let (_, pred) = predict(model, &item.inputs, &item.positions, cluster, &registry)?;
        let mut m = match_segments(&pred.to_labeling()?, &item.labels)?;
        m.pairs.clear();
        acc.merge(&m);
    }
    Ok(panoptic_quality(&acc, &registry))
}

/// Losses averaged over the iterations since the previous row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSummary {
    pub seg_source: f64,
    pub aux: f64,
    pub seg_target: f64,
    pub consistency: f64,
}

impl LossSummary {
    fn add(&mut self, o: &LossSummary, scale: f64) {
        self.seg_source += o.seg_source * scale;
        self.aux += o.aux * scale;
        self.seg_target += o.seg_target * scale;
        self.consistency += o.consistency * scale;
    }

    pub fn total(&self) -> f64 {
        total_loss(&[self.seg_source, self.aux, self.seg_target, self.consistency])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub pq: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub miou: f64,
    pub losses: LossSummary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub const HEADER: &'static str = "iteration,pq,pq_th,pq_st,miou,loss_seg_src,loss_aux,loss_seg_tgt,loss_con";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.iteration, r.pq, r.pq_th, r.pq_st, r.miou, l.seg_source, l.aux, l.seg_target, l.consistency
            );
        }
        s
    }
}

fn registry_of(source: &[SourceItem]) -> Result<Arc<ClassRegistry>> {
    source
        .first()
        .map(|s| s.frame.labels().map(|l| l.registry().clone()))
        .ok_or_else(|| Error::Precondition("source set is empty".into()))?
}

/// Source losses (segmentation and 2D auxiliary) of one item, optionally
/// after a drop. Returns `(seg, aux)`.
fn source_step(
    model: &ToyModel,
    item: &SourceItem,
    cfg: &TrainConfig,
    drop_seed: Option<u64>,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let dropped;
    let (inputs, image) = match (drop_seed, &item.analysis) {
        (Some(seed), Some(analysis)) => {
            let (frame, report) = amd_apply_with(&item.frame, analysis, &cfg.ratios, seed)?;
            let mut inputs = item.inputs.clone();
            match report.modality {
                Some(Modality::Image) => inputs.refresh_rgb(&frame.image),
                _ => {
                    for &i in report.dropped_points() {
                        inputs.zero_lidar(i);
                    }
                }
            }
            dropped = (inputs, frame.image);
            (&dropped.0, &dropped.1)
        }
        _ => (&item.inputs, &item.frame.image),
    };
    let terms = PointTerms {
        seg: Some((&item.labels, &item.weights)),
        teacher_hidden: None,
    };
    let (seg, _) = point_terms_grad(model, inputs, terms, grad)?;
    let w = image.width();
    let rgb: Vec<[f64; 3]> = item
        .aux_pixels
        .iter()
        .map(|&p| image.pixel(p % w, p / w).map(f64::from))
        .collect();
    let aux = aux_grad(model, &rgb, &item.aux_labels, grad)?;
    Ok((seg, aux))
}

fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64, scale: f64) -> Result<()> {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * scale * g;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("training diverged".into()));
    }
    Ok(())
}

/// Source-only training with segmentation and auxiliary losses, no drop.
pub fn pretrain(cfg: &TrainConfig, source: &[SourceItem]) -> Result<ToyModel> {
    cfg.validate()?;
    let registry = registry_of(source)?;
    let shape = ModelShape {
        hidden: cfg.hidden,
        classes: registry.num_semantic(),
    };
    let mut model = ToyModel::init(shape, derive_seed(cfg.seed, 100));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 101));
    let total = cfg.pretrain_iterations;
    let mut grad = vec![0.0; shape.num_params()];
    for it in 0..total {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..cfg.batch_size {
            let item = &source[rng.gen_range(0..source.len())];
            source_step(&model, item, cfg, None, &mut grad)?;
        }
        sgd_step(&mut model.theta, &grad, lr_at(cfg.lr, it, total), 1.0 / cfg.batch_size as f64)?;
    }
    Ok(model)
}

/// Result of [`adapt`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub iterations: usize,
    pub trajectory: Trajectory,
}

/// Target pseudo-labels for one frame from the teacher.
pub fn pseudo_labels(
    teacher: &ToyModel,
    item: &TargetItem,
    cfg: &TrainConfig,
    registry: &Arc<ClassRegistry>,
) -> Result<(Forward, PseudoLabelSet)> {
    let (fw, pred) = predict(teacher, &item.inputs, &item.positions, &cfg.cluster, registry)?;
    let pl = match cfg.refine {
        RefineMode::Full => refine(&pred, &item.geo, &item.vis, &cfg.thresholds)?,
        RefineMode::FilterOnly => filter_only(&pred, &cfg.thresholds)?,
    };
    Ok((fw, pl))
}

/// Mean-teacher adaptation. Each iteration draws a source frame (dropped when
/// enabled) and the next target frame of a per-epoch shuffle; the student is
/// updated by SGD on the summed losses and the teacher follows by EMA.
pub fn adapt(
    cfg: &TrainConfig,
    pretrained: &ToyModel,
    source: &[SourceItem],
    target: &[TargetItem],
    eval: &[EvalItem],
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let registry = registry_of(source)?;
    if target.is_empty() {
        return Err(Error::Precondition("target set is empty".into()));
    }
    if cfg.use_amd && source.iter().any(|s| s.analysis.is_none()) {
        return Err(Error::Precondition("source items were prepared without drop candidates".into()));
    }
    let mut student = pretrained.clone();
    let mut teacher = pretrained.clone();
    let total = cfg.adapt_iterations(target.len());
    let mut src_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 201));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 202));
    let drop_base = derive_seed(cfg.seed, 203);
    let mut order: Vec<usize> = Vec::new();
    let mut grad = vec![0.0; student.theta.len()];
    let mut trajectory = Trajectory::default();
    let mut window = LossSummary::default();
    let mut window_len = 0usize;
    let mut draw = 0u64;
    for it in 0..total {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut losses = LossSummary::default();
        for _ in 0..cfg.batch_size {
            let s = &source[src_rng.gen_range(0..source.len())];
            let seed = cfg.use_amd.then(|| derive_seed(drop_base, draw));
            draw += 1;
            let (seg, aux) = source_step(&student, s, cfg, seed, &mut grad)?;
            losses.seg_source += seg;
            losses.aux += aux;

            if order.is_empty() {
                order = (0..target.len()).collect();
                order.shuffle(&mut tgt_rng);
                order.reverse();
            }
            let t = &target[order.pop().expect("refilled")];
            let (tfw, pl) = pseudo_labels(&teacher, t, cfg, &registry)?;
            let labels: Vec<usize> = pl.point_classes().iter().map(|&c| (c as usize).saturating_sub(1)).collect();
            let terms = PointTerms {
                seg: Some((&labels, &pl.weights)),
                teacher_hidden: Some(&tfw.hidden),
            };
            let (seg_t, con) = point_terms_grad(&student, &t.inputs, terms, &mut grad)?;
            losses.seg_target += seg_t;
            losses.consistency += con;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        sgd_step(&mut student.theta, &grad, lr_at(cfg.lr, it, total), scale)?;
        ema_update(&mut teacher.theta, &student.theta, cfg.ema_momentum)?;
        window.add(&losses, scale);
        window_len += 1;
        let last = it + 1 == total;
        if !eval.is_empty() && ((cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0) || last) {
            let report = evaluate_model(&teacher, eval, &cfg.cluster)?;
            let mut avg = LossSummary::default();
            avg.add(&window, 1.0 / window_len as f64);
            trajectory.rows.push(TrajectoryRow {
                iteration: it + 1,
                pq: report.pq,
                pq_th: report.pq_th,
                pq_st: report.pq_st,
                miou: report.miou,
                losses: avg,
            });
            window = LossSummary::default();
            window_len = 0;
        }
    }
    Ok(AdaptOutcome {
        student,
        teacher,
        iterations: total,
        trajectory,
    })
}

/// Pretraining followed by adaptation. Returns the pretrained model too.
pub fn train_uda(
    cfg: &TrainConfig,
    source: &[SourceItem],
    target: &[TargetItem],
    eval: &[EvalItem],
) -> Result<(ToyModel, AdaptOutcome)> {
    let pre = pretrain(cfg, source)?;
    let out = adapt(cfg, &pre, source, target, eval)?;
    Ok((pre, out))
}
