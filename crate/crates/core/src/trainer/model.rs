//! Point-wise toy segmentation network with hand-written gradients.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::project_points;
use crate::error::{shape_err, Error, Result};
use crate::frame::Frame;
use crate::panoptic::ClassRegistry;
use crate::pseudolabel::{PredictionSet, Segment};
use crate::mask::PointMask;
use crate::superpoints::{ClusterParams, Clusterer, Dbscan};
use crate::voxel::RadiusIndex;

/// Per-point inputs: height, range, intensity, local density, projected RGB.
pub const NUM_INPUTS: usize = 7;
pub const RGB_INPUTS: usize = 3;
/// Columns derived from the LiDAR (zeroed by a LiDAR drop).
pub const LIDAR_INPUTS: std::ops::Range<usize> = 0..4;
pub const DENSITY_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn num_params(&self) -> usize {
        let (h, c) = (self.hidden, self.classes);
        h * NUM_INPUTS + h + c * h + c + c * RGB_INPUTS + c
    }

    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * NUM_INPUTS
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.classes * self.hidden
    }
    fn a(&self) -> usize {
        self.b2() + self.classes
    }
    fn ab(&self) -> usize {
        self.a() + self.classes * RGB_INPUTS
    }
}

/// Flat parameter vector: W1 (H x 7), b1, W2 (C x H), b2, aux A (C x 3), aux bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub shape: ModelShape,
    pub theta: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(shape: ModelShape) -> Self {
        ToyModel {
            shape,
            theta: vec![0.0; shape.num_params()],
        }
    }

    /// Gaussian weights scaled by 1/sqrt(fan-in), zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut m = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let d = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            for v in &mut m.theta[range] {
                *v = d.sample(&mut rng);
            }
        };
        fill(shape.w1()..shape.b1(), NUM_INPUTS);
        fill(shape.w2()..shape.b2(), shape.hidden);
        fill(shape.a()..shape.ab(), RGB_INPUTS);
        m
    }

    pub fn from_theta(shape: ModelShape, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != shape.num_params() {
            return Err(shape_err(format!(
                "{} parameters, shape {shape:?} needs {}",
                theta.len(),
                shape.num_params()
            )));
        }
        Ok(ToyModel { shape, theta })
    }

    /// Recovers hidden size from a parameter count for `classes` outputs.
    pub fn shape_for(num_params: usize, classes: usize) -> Result<ModelShape> {
        // n = h (NUM_INPUTS + 1 + c) + c (RGB_INPUTS + 2)
        let fixed = classes * (RGB_INPUTS + 2);
        let per = NUM_INPUTS + 1 + classes;
        if num_params < fixed || (num_params - fixed) % per != 0 || num_params == fixed {
            return Err(shape_err(format!("{num_params} parameters fit no model with {classes} classes")));
        }
        Ok(ModelShape {
            hidden: (num_params - fixed) / per,
            classes,
        })
    }

    fn check_finite(&self) -> Result<()> {
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model parameters".into()));
        }
        Ok(())
    }
}

/// Row-major `n x NUM_INPUTS` inputs plus the pixel each point projects to.
#[derive(Debug, Clone, PartialEq)]
pub struct PointInputs {
    pub x: Vec<f64>,
    pub pixels: Vec<Option<usize>>,
}

impl PointInputs {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * NUM_INPUTS..(i + 1) * NUM_INPUTS]
    }

    /// Re-reads the RGB columns from `image` (0 for points off the image).
    pub fn refresh_rgb(&mut self, image: &crate::camera::CameraImage) {
        let w = image.width();
        for (i, px) in self.pixels.iter().enumerate() {
            let rgb = px.map_or([0.0; 3], |p| image.pixel(p % w, p / w));
            for k in 0..RGB_INPUTS {
                self.x[i * NUM_INPUTS + 4 + k] = rgb[k] as f64;
            }
        }
    }

    pub fn zero_lidar(&mut self, i: usize) {
        for k in LIDAR_INPUTS {
            self.x[i * NUM_INPUTS + k] = 0.0;
        }
    }
}

/// Features of every point: z / 2, r / 25, intensity, ln(1 + neighbors within
/// 0.5 m) / 4 and the RGB value at the rounded projection.
pub fn point_inputs(frame: &Frame) -> Result<PointInputs> {
    let cloud = &frame.cloud;
    let pos = cloud.positions();
    let index = RadiusIndex::new(pos, DENSITY_RADIUS)?;
    let w = frame.image.width();
    let pixels: Vec<Option<usize>> = project_points(cloud, &frame.calib, w, frame.image.height())
        .iter()
        .map(|p| p.pixel().map(|(x, y)| y * w + x))
        .collect();
    let mut x = Vec::with_capacity(pos.len() * NUM_INPUTS);
    for (i, p) in pos.iter().enumerate() {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let density = ((1 + index.count_neighbors(i)) as f64).ln() / 4.0;
        x.extend_from_slice(&[p[2] / 2.0, r / 25.0, cloud.intensity(i), density, 0.0, 0.0, 0.0]);
    }
    let mut inputs = PointInputs { x, pixels };
    inputs.refresh_rgb(&frame.image);
    Ok(inputs)
}

/// Outputs of the point head.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `n x H` tanh activations.
    pub hidden: Vec<f64>,
    /// `n x C` logits.
    pub logits: Vec<f64>,
    /// `n x C` class probabilities.
    pub probs: Vec<f64>,
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

pub fn forward(model: &ToyModel, inputs: &PointInputs) -> Result<Forward> {
    model.check_finite()?;
    let s = model.shape;
    let (h, c) = (s.hidden, s.classes);
    let t = &model.theta;
    let n = inputs.len();
    let mut hidden = vec![0.0; n * h];
    let mut logits = vec![0.0; n * c];
    let mut probs = vec![0.0; n * c];
    for i in 0..n {
        let x = inputs.row(i);
        let hi = &mut hidden[i * h..(i + 1) * h];
        for (j, hv) in hi.iter_mut().enumerate() {
            let w = &t[s.w1() + j * NUM_INPUTS..s.w1() + (j + 1) * NUM_INPUTS];
            let a: f64 = t[s.b1() + j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *hv = a.tanh();
        }
        let zi = &mut logits[i * c..(i + 1) * c];
        for (k, zv) in zi.iter_mut().enumerate() {
            let w = &t[s.w2() + k * h..s.w2() + (k + 1) * h];
            *zv = t[s.b2() + k] + w.iter().zip(hi.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_into(zi, &mut probs[i * c..(i + 1) * c]);
    }
    Ok(Forward { hidden, logits, probs })
}

fn aux_logits(model: &ToyModel, rgb: [f64; 3], out: &mut [f64]) {
    let s = model.shape;
    let t = &model.theta;
    for (k, o) in out.iter_mut().enumerate() {
        let w = &t[s.a() + k * RGB_INPUTS..s.a() + (k + 1) * RGB_INPUTS];
        *o = t[s.ab() + k] + w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2];
    }
}

/// Per-pixel class probabilities of the 2D auxiliary head.
pub fn forward_aux(model: &ToyModel, rgb: &[[f64; 3]]) -> Result<Vec<f64>> {
    model.check_finite()?;
    let c = model.shape.classes;
    let mut z = vec![0.0; c];
    let mut out = vec![0.0; rgb.len() * c];
    for (i, &px) in rgb.iter().enumerate() {
        aux_logits(model, px, &mut z);
        softmax_into(&z, &mut out[i * c..(i + 1) * c]);
    }
    Ok(out)
}

/// Weighted mean cross-entropy over points with positive weight; 0 when every
/// weight is 0.
pub fn seg_loss(probs: &[f64], classes: usize, labels: &[usize], weights: &[f64]) -> f64 {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return 0.0;
    }
    let mut l = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        if w > 0.0 {
            l -= w * probs[i * classes + y].ln();
        }
    }
    l / wsum
}

/// Squared L2 distance between feature rows, averaged over rows.
pub fn consistency_loss(f_stu: &[f64], f_tea: &[f64], hidden: usize) -> Result<f64> {
    if f_stu.len() != f_tea.len() || hidden == 0 || f_stu.len() % hidden != 0 {
        return Err(shape_err("consistency features differ in shape"));
    }
    let n = f_stu.len() / hidden;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(f_stu.iter().zip(f_tea).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
}

/// Mean cross-entropy of per-pixel probabilities; 0 with no pixels.
pub fn aux_loss(aux_probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| aux_probs[i * classes + y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Unweighted sum of loss terms.
pub fn total_loss(terms: &[f64]) -> f64 {
    terms.iter().sum()
}

/// Point-head loss terms evaluated on one input set.
#[derive(Debug, Clone, Copy)]
pub struct PointTerms<'a> {
    pub seg: Option<(&'a [usize], &'a [f64])>,
    /// Teacher hidden features, treated as constants.
    pub teacher_hidden: Option<&'a [f64]>,
}

/// Adds the gradient of the point-head terms to `grad` and returns
/// `(seg loss, consistency loss)`.
pub fn point_terms_grad(
    model: &ToyModel,
    inputs: &PointInputs,
    terms: PointTerms<'_>,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let fw = forward(model, inputs)?;
    point_terms_grad_with(model, inputs, &fw, terms, grad)
}

/// As [`point_terms_grad`] with a precomputed student forward pass.
pub fn point_terms_grad_with(
    model: &ToyModel,
    inputs: &PointInputs,
    fw: &Forward,
    terms: PointTerms<'_>,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let s = model.shape;
    let (h, c) = (s.hidden, s.classes);
    let n = inputs.len();
    if grad.len() != s.num_params() {
        return Err(shape_err("gradient buffer has the wrong length"));
    }
    let t = &model.theta;
    let (mut seg, mut con) = (0.0, 0.0);
    let seg_scale = match terms.seg {
        Some((labels, weights)) => {
            if labels.len() != n || weights.len() != n {
                return Err(shape_err("labels or weights do not match the points"));
            }
            let wsum: f64 = weights.iter().sum();
            if wsum > 0.0 {
                Some(1.0 / wsum)
            } else {
                None
            }
        }
        None => None,
    };
    if let Some(th) = terms.teacher_hidden {
        if th.len() != n * h {
            return Err(shape_err("teacher features do not match the points"));
        }
    }
    if seg_scale.is_none() && terms.teacher_hidden.is_none() {
        return Ok((0.0, 0.0));
    }
    let mut dz = vec![0.0; c];
    let mut dh = vec![0.0; h];
    for i in 0..n {
        dz.iter_mut().for_each(|v| *v = 0.0);
        dh.iter_mut().for_each(|v| *v = 0.0);
        let hi = &fw.hidden[i * h..(i + 1) * h];
        if let (Some(scale), Some((labels, weights))) = (seg_scale, terms.seg) {
            let w = weights[i];
            if w > 0.0 {
                let y = labels[i];
                seg -= w * scale * log_softmax_at(&fw.logits[i * c..(i + 1) * c], y);
                for k in 0..c {
                    let p = fw.probs[i * c + k];
                    dz[k] = w * scale * (p - if k == y { 1.0 } else { 0.0 });
                }
            }
        }
        if let Some(th) = terms.teacher_hidden {
            let ti = &th[i * h..(i + 1) * h];
            for j in 0..h {
                let d = hi[j] - ti[j];
                con += d * d / n as f64;
                dh[j] += 2.0 * d / n as f64;
            }
        }
        for k in 0..c {
            if dz[k] == 0.0 {
                continue;
            }
            grad[s.b2() + k] += dz[k];
            for j in 0..h {
                grad[s.w2() + k * h + j] += dz[k] * hi[j];
                dh[j] += dz[k] * t[s.w2() + k * h + j];
            }
        }
        let x = inputs.row(i);
        for j in 0..h {
            let da = dh[j] * (1.0 - hi[j] * hi[j]);
            if da == 0.0 {
                continue;
            }
            grad[s.b1() + j] += da;
            for (q, &xv) in x.iter().enumerate() {
                grad[s.w1() + j * NUM_INPUTS + q] += da * xv;
            }
        }
    }
    Ok((seg, con))
}

/// Adds the gradient of the mean per-pixel cross-entropy of the 2D head and
/// returns the loss.
pub fn aux_grad(model: &ToyModel, rgb: &[[f64; 3]], labels: &[usize], grad: &mut [f64]) -> Result<f64> {
    model.check_finite()?;
    if rgb.len() != labels.len() {
        return Err(shape_err("aux pixels and labels differ in length"));
    }
    let s = model.shape;
    let c = s.classes;
    if rgb.is_empty() {
        return Ok(0.0);
    }
    let m = rgb.len() as f64;
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut loss = 0.0;
    for (&px, &y) in rgb.iter().zip(labels) {
        aux_logits(model, px, &mut z);
        softmax_into(&z, &mut p);
        loss -= log_softmax_at(&z, y) / m;
        for k in 0..c {
            let d = (p[k] - if k == y { 1.0 } else { 0.0 }) / m;
            grad[s.ab() + k] += d;
            for q in 0..RGB_INPUTS {
                grad[s.a() + k * RGB_INPUTS + q] += d * px[q];
            }
        }
    }
    Ok(loss)
}

/// theta_teacher <- m * theta_teacher + (1 - m) * theta_student.
pub fn ema_update(teacher: &mut [f64], student: &[f64], m: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(shape_err("teacher and student differ in parameter count"));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// Step decay: halved at 1/3, 1/2 and 2/3 of `total`.
pub fn lr_at(base: f64, iteration: usize, total: usize) -> f64 {
    let (i, t) = (iteration as u128, total as u128);
    let steps = [3 * i >= t, 2 * i >= t, 3 * i >= 2 * t]
        .iter()
        .filter(|&&b| b)
        .count();
    base * 0.5f64.powi(steps as i32)
}

/// Argmax class per point (ties to the lowest id); stuff points of a class
/// form one segment, thing points are split by density clustering (noise
/// stays unassigned). Segment confidence is the mean max-probability of its
/// points, point confidence the point's max-probability.
pub fn derive_instances(
    probs: &[f64],
    positions: &[[f64; 3]],
    params: &ClusterParams,
    registry: Arc<ClassRegistry>,
) -> Result<PredictionSet> {
    let c = registry.num_semantic();
    let n = positions.len();
    if probs.len() != n * c {
        return Err(shape_err(format!("{} probabilities for {n} points and {c} classes", probs.len())));
    }
    let mut argmax = vec![0usize; n];
    let mut maxp = vec![0.0; n];
    for i in 0..n {
        let row = &probs[i * c..(i + 1) * c];
        let (k, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b });
        argmax[i] = k;
        maxp[i] = p.clamp(0.0, 1.0);
    }
    let mut segments = Vec::new();
    for k in 0..c {
        let class = k as u32 + 1;
        let members = PointMask::from_fn(n, |i| argmax[i] == k);
        if members.is_empty() {
            continue;
        }
        let masks = if registry.is_thing(class) {
            Dbscan(*params).cluster(positions, &members)?
        } else {
            vec![members]
        };
        for mask in masks {
            let score = mask.iter().map(|i| maxp[i]).sum::<f64>() / mask.count() as f64;
            segments.push(Segment {
                class,
                score: score.clamp(0.0, 1.0),
                mask,
            });
        }
    }
    PredictionSet::new(segments, maxp, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panoptic::ClassKind;
    use proptest::prelude::*;
    use rand::Rng;

    const SHAPE: ModelShape = ModelShape { hidden: 5, classes: 4 };

    fn random_inputs(n: usize, seed: u64) -> PointInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointInputs {
            x: (0..n * NUM_INPUTS).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            pixels: vec![None; n],
        }
    }

    fn random_case(seed: u64) -> (ToyModel, PointInputs, Vec<usize>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let model = ToyModel::init(SHAPE, seed);
        let inputs = random_inputs(9, seed);
        let labels = (0..9).map(|_| rng.gen_range(0..SHAPE.classes)).collect();
        let weights = (0..9).map(|i| if i % 4 == 0 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
        (model, inputs, labels, weights)
    }

    fn registry() -> Arc<ClassRegistry> {
        Arc::new(
            ClassRegistry::new(vec![
                ("ground", ClassKind::Stuff),
                ("wall", ClassKind::Stuff),
                ("box", ClassKind::Thing),
                ("cylinder", ClassKind::Thing),
            ])
            .unwrap(),
        )
    }

    /// Central differences of `f` at every coordinate.
    fn numeric_grad(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|k| {
                t[k] = theta[k] + h;
                let up = f(&t);
                t[k] = theta[k] - h;
                let down = f(&t);
                t[k] = theta[k];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
            assert!(rel <= 1e-4, "coordinate {k}: analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn default_shape_has_233_parameters() {
        let s = ModelShape { hidden: 16, classes: 5 };
        assert_eq!(s.num_params(), 233);
        assert_eq!(ToyModel::shape_for(233, 5).unwrap(), s);
        assert!(ToyModel::shape_for(234, 5).is_err());
        assert!(ToyModel::from_theta(s, vec![0.0; 10]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let fw = forward(&ToyModel::zeros(SHAPE), &random_inputs(6, 1)).unwrap();
        assert!(fw.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn duplicated_points_get_identical_rows() {
        let mut inputs = random_inputs(3, 2);
        let first = inputs.row(0).to_vec();
        inputs.x.extend_from_slice(&first);
        inputs.pixels.push(None);
        let fw = forward(&ToyModel::init(SHAPE, 3), &inputs).unwrap();
        let c = SHAPE.classes;
        assert_eq!(fw.probs[..c], fw.probs[3 * c..4 * c]);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut m = ToyModel::zeros(SHAPE);
        m.theta[3] = f64::NAN;
        assert!(matches!(forward(&m, &random_inputs(2, 0)), Err(Error::Numeric(_))));
        assert!(matches!(forward_aux(&m, &[[0.1; 3]]), Err(Error::Numeric(_))));
    }

    #[test]
    fn seg_loss_examples() {
        let labels = [0, 3, 1];
        let onehot: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..4).map(move |k| if k == y { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(seg_loss(&onehot, 4, &labels, &[1.0, 0.5, 2.0]), 0.0);
        assert_eq!(seg_loss(&[0.25; 12], 4, &labels, &[0.0; 3]), 0.0);
        let l = seg_loss(&[0.25; 12], 4, &labels, &[1.0, 0.2, 0.7]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn consistency_loss_examples() {
        let f = vec![0.3; 32];
        assert_eq!(consistency_loss(&f, &f, 16).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[1.0; 48], &[0.0; 48], 16).unwrap(), 16.0);
        assert!(consistency_loss(&[1.0; 16], &[0.0; 32], 16).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let mut oracle = 0.0;
        for i in 0..30 {
            oracle += (a[i] - b[i]).powi(2);
        }
        assert!((consistency_loss(&a, &b, 6).unwrap() - oracle / 5.0).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_examples() {
        assert_eq!(aux_loss(&[], 4, &[]), 0.0);
        assert_eq!(aux_loss(&[0.0, 1.0, 0.0, 0.0], 4, &[1]), 0.0);
        assert!((aux_loss(&[0.25; 8], 4, &[2, 0]) - 4f64.ln()).abs() < 1e-12);
        let probs = forward_aux(&ToyModel::zeros(SHAPE), &[[0.2, 0.4, 0.6]; 3]).unwrap();
        assert!((aux_loss(&probs, 4, &[0, 1, 2]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_terms() {
        assert_eq!(total_loss(&[0.0; 4]), 0.0);
        assert_eq!(total_loss(&[1.0, 2.0, 3.0, 4.0]), 10.0);
    }

    #[test]
    fn ema_examples() {
        let mut t = vec![0.3, -2.0];
        ema_update(&mut t, &[1.0, 5.0], 0.0).unwrap();
        assert_eq!(t, vec![1.0, 5.0]);
        let mut t = vec![0.0];
        ema_update(&mut t, &[1.0], 0.99).unwrap();
        assert!((t[0] - 0.01).abs() < 1e-15);
        assert!(ema_update(&mut t, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn ema_matches_geometric_series() {
        let s = [1.0, -0.5, 3.25];
        let mut t = vec![0.0; 3];
        for k in 1..=1000 {
            ema_update(&mut t, &s, 0.99).unwrap();
            let f = 1.0 - 0.99f64.powi(k);
            for (tv, sv) in t.iter().zip(&s) {
                assert!((tv - sv * f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learning_rate_halves_at_thirds_and_half() {
        let lr: Vec<f64> = [0, 32, 33, 49, 50, 65, 66, 67, 99].iter().map(|&i| lr_at(0.4, i, 99)).collect();
        assert_eq!(lr, vec![0.4, 0.4, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05, 0.05]);
        assert_eq!(lr_at(1.0, 0, 0), 0.125);
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (model, inputs, labels, weights) = random_case(seed);
            let mut g = vec![0.0; SHAPE.num_params()];
            let terms = PointTerms { seg: Some((&labels, &weights)), teacher_hidden: None };
            let (loss, _) = point_terms_grad(&model, &inputs, terms, &mut g).unwrap();
            let f = |t: &[f64]| {
                let m = ToyModel::from_theta(SHAPE, t.to_vec()).unwrap();
                seg_loss(&forward(&m, &inputs).unwrap().probs, SHAPE.classes, &labels, &weights)
            };
            assert!((loss - f(&model.theta)).abs() < 1e-12);
            assert_close(&g, &numeric_grad(&model.theta, f));
        }
    }

    #[test]
    fn consistency_and_aux_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (model, inputs, _, _) = random_case(seed);
            let teacher = forward(&ToyModel::init(SHAPE, seed + 50), &inputs).unwrap().hidden;
            let mut g = vec![0.0; SHAPE.num_params()];
            let terms = PointTerms { seg: None, teacher_hidden: Some(&teacher) };
            point_terms_grad(&model, &inputs, terms, &mut g).unwrap();
            let f = |t: &[f64]| {
                let m = ToyModel::from_theta(SHAPE, t.to_vec()).unwrap();
                consistency_loss(&forward(&m, &inputs).unwrap().hidden, &teacher, SHAPE.hidden).unwrap()
            };
            assert_close(&g, &numeric_grad(&model.theta, f));

            let rgb: Vec<[f64; 3]> = (0..7).map(|i| [0.1 * i as f64, 0.5, 1.0 - 0.1 * i as f64]).collect();
            let labels: Vec<usize> = (0..7).map(|i| i % SHAPE.classes).collect();
            let mut g = vec![0.0; SHAPE.num_params()];
            aux_grad(&model, &rgb, &labels, &mut g).unwrap();
            let f = |t: &[f64]| {
                let m = ToyModel::from_theta(SHAPE, t.to_vec()).unwrap();
                aux_loss(&forward_aux(&m, &rgb).unwrap(), SHAPE.classes, &labels)
            };
            assert_close(&g, &numeric_grad(&model.theta, f));
        }
    }

    #[test]
    fn gradient_vanishes_at_a_one_hot_fit() {
        let mut m = ToyModel::zeros(SHAPE);
        m.theta[SHAPE.b2()] = 100.0;
        let inputs = random_inputs(4, 8);
        let mut g = vec![0.0; SHAPE.num_params()];
        let terms = PointTerms { seg: Some((&[0; 4], &[1.0; 4])), teacher_hidden: None };
        let (loss, _) = point_terms_grad(&m, &inputs, terms, &mut g).unwrap();
        assert!(loss < 1e-12);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn consistency_with_matching_teacher_has_zero_gradient() {
        let (model, inputs, _, _) = random_case(11);
        let own = forward(&model, &inputs).unwrap().hidden;
        let mut g = vec![0.0; SHAPE.num_params()];
        let terms = PointTerms { seg: None, teacher_hidden: Some(&own) };
        let (_, con) = point_terms_grad(&model, &inputs, terms, &mut g).unwrap();
        assert_eq!(con, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derive_instances_splits_separated_blobs() {
        let mut positions = Vec::new();
        for k in 0..10 {
            positions.push([5.0 + 0.1 * k as f64, 0.0, 0.0]);
            positions.push([15.0 + 0.1 * k as f64, 0.0, 0.0]);
        }
        let probs: Vec<f64> = (0..20).flat_map(|_| [0.0, 0.0, 1.0, 0.0]).collect();
        let pred = derive_instances(&probs, &positions, &ClusterParams::default(), registry()).unwrap();
        assert_eq!(pred.segments.len(), 2);
        assert!(pred.segments.iter().all(|s| s.class == 3 && s.mask.count() == 10 && s.score == 1.0));
    }

    #[test]
    fn derive_instances_stuff_and_ties() {
        let positions: Vec<[f64; 3]> = (0..6).map(|i| [i as f64 * 7.0, 0.0, 0.0]).collect();
        let probs: Vec<f64> = (0..6).flat_map(|_| [0.1, 0.7, 0.1, 0.1]).collect();
        let pred = derive_instances(&probs, &positions, &ClusterParams::default(), registry()).unwrap();
        assert_eq!(pred.segments.len(), 1);
        assert_eq!(pred.segments[0].class, 2);
        assert!((pred.segments[0].score - 0.7).abs() < 1e-12);

        let uniform = vec![0.25; 24];
        let pred = derive_instances(&uniform, &positions, &ClusterParams::default(), registry()).unwrap();
        assert_eq!(pred.segments.len(), 1);
        assert_eq!(pred.segments[0].class, 1);
        assert!(pred.point_conf.iter().all(|&p| p == 0.25));
        assert!(derive_instances(&uniform[..20], &positions, &ClusterParams::default(), registry()).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_are_distributions(seed in 0u64..10_000, n in 1usize..20) {
            let fw = forward(&ToyModel::init(SHAPE, seed), &random_inputs(n, seed + 1)).unwrap();
            for row in fw.probs.chunks(SHAPE.classes) {
                prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_weight_points_do_not_affect_the_gradient(seed in 0u64..10_000, shift in 1usize..4) {
            let (model, inputs, labels, weights) = random_case(seed);
            let grad = |labels: &[usize]| {
                let mut g = vec![0.0; SHAPE.num_params()];
                let terms = PointTerms { seg: Some((labels, &weights)), teacher_hidden: None };
                point_terms_grad(&model, &inputs, terms, &mut g).unwrap();
                g
            };
            let before = grad(&labels);
            let perturbed: Vec<usize> = labels
                .iter()
                .zip(&weights)
                .map(|(&y, &w)| if w == 0.0 { (y + shift) % SHAPE.classes } else { y })
                .collect();
            prop_assert_eq!(before, grad(&perturbed));
        }
    }
}
