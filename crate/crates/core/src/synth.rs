//! Synthetic paired LiDAR + camera scenes with exact panoptic ground truth,
//! controllable domain shifts, and a stand-in for 2D foundation-model proposals.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{project_point, project_points, CameraImage, Calibration};
use crate::error::{Error, Result};
use crate::frame::{Frame, PointCloud};
use crate::panoptic::{encode_panoptic, ClassRegistry, PanopticLabeling};
use crate::superpoints::Proposal2d;

/// Mixes a base seed with an index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub registry: Arc<ClassRegistry>,
    /// Inclusive range of thing instances per scene.
    pub objects: (usize, usize),
    /// Farthest forward distance of object centers, meters.
    pub extent: f64,
    /// Inclusive range of points per thing instance.
    pub points_per_object: (usize, usize),
    pub ground_points: usize,
    pub wall_points: usize,
    /// Vertical noise of ground points, meters.
    pub ground_noise: f64,
    /// LiDAR mounting height above the ground, meters.
    pub sensor_height: f64,
    /// Unsampled gap between the ground and object or wall surfaces (wheels,
    /// curbs), meters.
    pub clearance: f64,
    pub calib: Calibration,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let (w, h) = (crate::camera::DEFAULT_WIDTH, crate::camera::DEFAULT_HEIGHT);
        SceneConfig {
            seed: 0,
            registry: Arc::new(ClassRegistry::default()),
            objects: (3, 6),
            extent: 20.0,
            points_per_object: (300, 600),
            ground_points: 2500,
            wall_points: 1500,
            ground_noise: 0.02,
            sensor_height: 1.7,
            clearance: 0.2,
            calib: Calibration::forward_facing(w, h),
            image_width: w,
            image_height: h,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.extent.is_finite() && self.extent >= 8.0) {
            return bad("scene extent must be at least 8 m");
        }
        if self.objects.0 > self.objects.1 {
            return bad("object count range is inverted");
        }
        if self.points_per_object.0 < 20 || self.points_per_object.0 > self.points_per_object.1 {
            return bad("points per object must be an ordered range starting at >= 20");
        }
        if !(self.sensor_height > 0.0) || !(self.ground_noise >= 0.0) || !(self.clearance >= 0.0) {
            return bad("sensor height must be positive, ground noise and clearance non-negative");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        if self.registry.things().next().is_none() || self.registry.stuff().next().is_none() {
            return bad("registry needs a thing and a stuff class");
        }
        if self.ground_points + self.wall_points == 0 && self.objects.1 == 0 {
            return bad("scene would contain no points");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftParams {
    /// Pixel gamma; values above 1 darken the image.
    pub image_gamma: f64,
    pub image_noise_sigma: f64,
    /// Independent per-point drop probability.
    pub point_drop_prob: f64,
    /// Fraction of elevation beams kept.
    pub beam_keep_fraction: f64,
    /// Additive noise on LiDAR feature channels.
    pub feature_noise_sigma: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            image_gamma: 1.0,
            image_noise_sigma: 0.0,
            point_drop_prob: 0.0,
            beam_keep_fraction: 1.0,
            feature_noise_sigma: 0.0,
        }
    }
}

impl ShiftParams {
    /// Night-like darkening with rain-like sparsification and a half-beam sensor.
    pub fn desk_standard() -> Self {
        ShiftParams {
            image_gamma: 2.2,
            point_drop_prob: 0.3,
            beam_keep_fraction: 0.5,
            ..ShiftParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.image_gamma > 0.0
            && self.image_gamma.is_finite()
            && self.image_noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.point_drop_prob)
            && self.beam_keep_fraction > 0.0
            && self.beam_keep_fraction <= 1.0
            && self.feature_noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shift parameters {self:?}")))
        }
    }
}

/// Number of elevation beams used for sensor decimation.
pub const BEAM_COUNT: usize = 64;
const ELEVATION_RANGE_DEG: (f64, f64) = (-35.0, 15.0);

/// Elevation beam of a point in `0..BEAM_COUNT`.
pub fn beam_of(p: [f64; 3]) -> usize {
    let elev = p[2].atan2(p[0].hypot(p[1])).to_degrees();
    let (lo, hi) = ELEVATION_RANGE_DEG;
    let b = ((elev - lo) / (hi - lo) * BEAM_COUNT as f64).floor();
    b.clamp(0.0, (BEAM_COUNT - 1) as f64) as usize
}

/// Whether beam `b` survives keeping `fraction` of the beams (evenly spread).
pub fn beam_kept(b: usize, fraction: f64) -> bool {
    ((b + 1) as f64 * fraction).floor() > (b as f64 * fraction).floor()
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { half: [f64; 3], yaw: f64 },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    fn footprint(&self) -> f64 {
        match *self {
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius } => radius,
        }
    }
}

/// Appearance of a class: base RGB and LiDAR reflectance.
pub fn class_color(registry: &ClassRegistry, class_id: u32) -> [f32; 3] {
    const STUFF: [[f32; 3]; 2] = [[0.45, 0.42, 0.40], [0.85, 0.80, 0.55]];
    const THINGS: [[f32; 3]; 3] = [[0.75, 0.20, 0.15], [0.88, 0.48, 0.42], [0.25, 0.35, 0.90]];
    let (palette, rank): (&[[f32; 3]], usize) = if registry.is_thing(class_id) {
        (&THINGS, registry.things().position(|c| c == class_id).unwrap_or(0))
    } else {
        (&STUFF, registry.stuff().position(|c| c == class_id).unwrap_or(0))
    };
    if rank < palette.len() {
        palette[rank]
    } else {
        // Extra classes walk around the hue circle.
        let h = (rank as f32 * 0.61803) % 1.0;
        hsv(h, 0.7, 0.8)
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_reflectance(registry: &ClassRegistry, class_id: u32) -> f64 {
    if registry.is_thing(class_id) {
        let rank = registry.things().position(|c| c == class_id).unwrap_or(0);
        [0.70, 0.35, 0.55][rank % 3]
    } else {
        let rank = registry.stuff().position(|c| c == class_id).unwrap_or(0);
        [0.25, 0.45][rank % 2]
    }
}

const REFLECTANCE_NOISE: f64 = 0.06;

struct Placed {
    class: u32,
    shape: Shape,
    center: [f64; 2],
}

/// Generates one frame; identical configs give bit-identical frames.
pub fn generate_scene(config: &SceneConfig) -> Result<Frame> {
    config.validate()?;
    let reg = &config.registry;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ground_z = -config.sensor_height;
    let wall_x = config.extent + 3.0;

    let things: Vec<u32> = reg.things().collect();
    let stuff: Vec<u32> = reg.stuff().collect();
    let ground_class = stuff[0];
    let wall_class = *stuff.get(1).unwrap_or(&stuff[0]);

    let n_objects = rng.gen_range(config.objects.0..=config.objects.1);
    let mut placed: Vec<Placed> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let class = things[rng.gen_range(0..things.len())];
        let rank = things.iter().position(|&c| c == class).unwrap_or(0);
        let shape = match rank % 3 {
            0 => Shape::Box {
                half: [
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.5..1.0),
                ],
                yaw: rng.gen_range(0.0..PI),
            },
            1 => Shape::Cylinder {
                radius: rng.gen_range(0.3..0.6),
                height: rng.gen_range(1.0..2.0),
            },
            _ => Shape::Sphere {
                radius: rng.gen_range(0.45..0.9),
            },
        };
        let fp = shape.footprint();
        let mut center = None;
        for _ in 0..500 {
            let x = rng.gen_range(6.0..config.extent);
            let y = rng.gen_range(-0.7 * x..0.7 * x);
            let clear = placed.iter().all(|o| {
                (o.center[0] - x).hypot(o.center[1] - y) >= o.shape.footprint() + fp + 1.5
            });
            if clear && x + fp < wall_x - 1.5 {
                center = Some([x, y]);
                break;
            }
        }
        let center = center.ok_or_else(|| {
            Error::Config(format!(
                "could not place object {} of {n_objects} in a {} m scene",
                k + 1,
                config.extent
            ))
        })?;
        placed.push(Placed {
            class,
            shape,
            center,
        });
    }

    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut ids: Vec<u32> = Vec::new();
    let mut intensity: Vec<f64> = Vec::new();
    let noise = Normal::new(0.0, REFLECTANCE_NOISE).expect("valid sigma");
    let mut push = |p: [f64; 3], id: u32, class: u32, rng: &mut ChaCha8Rng| {
        positions.push(p);
        ids.push(id);
        let refl = class_reflectance(reg, class) + noise.sample(rng);
        intensity.push(refl.clamp(0.0, 1.0));
    };

    // Ground: uniform in range and bearing, so density falls off with distance.
    let ground_id = encode_panoptic(ground_class, 0)?;
    let ground_noise = (config.ground_noise > 0.0)
        .then(|| Normal::new(0.0, config.ground_noise).expect("valid sigma"));
    let max_bearing = 60f64.to_radians();
    let mut made = 0;
    while made < config.ground_points {
        let r = rng.gen_range(2.5..wall_x);
        let t = rng.gen_range(-max_bearing..max_bearing);
        let (x, y) = (r * t.cos(), r * t.sin());
        if placed
            .iter()
            .any(|o| (o.center[0] - x).hypot(o.center[1] - y) < o.shape.footprint())
        {
            continue;
        }
        let dz = ground_noise.map_or(0.0, |n| n.sample(&mut rng));
        push([x, y, ground_z + dz], ground_id, ground_class, &mut rng);
        made += 1;
    }

    let wall_id = encode_panoptic(wall_class, 0)?;
    let half_width = 0.6 * wall_x;
    for _ in 0..config.wall_points {
        let y = rng.gen_range(-half_width..half_width);
        let z = rng.gen_range(ground_z + config.clearance..ground_z + 3.0);
        push([wall_x, y, z], wall_id, wall_class, &mut rng);
    }

    for (k, obj) in placed.iter().enumerate() {
        let id = encode_panoptic(obj.class, k as u32 + 1)?;
        let n = rng.gen_range(config.points_per_object.0..=config.points_per_object.1);
        let mut made = 0;
        let mut attempts = 0;
        while made < n {
            attempts += 1;
            let (p, normal) = sample_surface(&obj.shape, obj.center, ground_z + config.clearance, &mut rng);
            let facing = -(normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2]) > 0.0;
            if facing || attempts > 200 * n {
                push(p, id, obj.class, &mut rng);
                made += 1;
            }
        }
    }

    let cloud = PointCloud::with_intensity(positions, intensity)?;
    let labels = PanopticLabeling::new(ids, reg.clone())?;
    let image = render(config, &cloud, &labels, &mut rng);
    Frame::new(cloud, image, config.calib.clone(), Some(labels))
}

fn sample_surface(
    shape: &Shape,
    center: [f64; 2],
    ground_z: f64,
    rng: &mut ChaCha8Rng,
) -> ([f64; 3], [f64; 3]) {
    match *shape {
        Shape::Box { half, yaw } => {
            let [hx, hy, hz] = half;
            let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (local, normal) = match face {
                0 => ([hx, a * hy, b * hz], [1.0, 0.0, 0.0]),
                1 => ([-hx, a * hy, b * hz], [-1.0, 0.0, 0.0]),
                2 => ([a * hx, hy, b * hz], [0.0, 1.0, 0.0]),
                3 => ([a * hx, -hy, b * hz], [0.0, -1.0, 0.0]),
                _ => ([a * hx, b * hy, hz], [0.0, 0.0, 1.0]),
            };
            let (s, c) = yaw.sin_cos();
            let rot = |v: [f64; 3]| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
            let p = rot(local);
            (
                [center[0] + p[0], center[1] + p[1], ground_z + hz + p[2]],
                rot(normal),
            )
        }
        Shape::Cylinder { radius, height } => {
            let side = 2.0 * PI * radius * height;
            let top = PI * radius * radius;
            if rng.gen_range(0.0..side + top) < side {
                let t = rng.gen_range(0.0..2.0 * PI);
                let z = rng.gen_range(0.0..height);
                (
                    [center[0] + radius * t.cos(), center[1] + radius * t.sin(), ground_z + z],
                    [t.cos(), t.sin(), 0.0],
                )
            } else {
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let t = rng.gen_range(0.0..2.0 * PI);
                (
                    [center[0] + r * t.cos(), center[1] + r * t.sin(), ground_z + height],
                    [0.0, 0.0, 1.0],
                )
            }
        }
        Shape::Sphere { radius } => {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let t = rng.gen_range(0.0..2.0 * PI);
            let rho = (1.0 - z * z).sqrt();
            let n = [rho * t.cos(), rho * t.sin(), z];
            (
                [
                    center[0] + radius * n[0],
                    center[1] + radius * n[1],
                    ground_z + radius + radius * n[2],
                ],
                n,
            )
        }
    }
}

/// Background gradient plus depth-tested splats of every point in its class color.
fn render(config: &SceneConfig, cloud: &PointCloud, labels: &PanopticLabeling, rng: &mut ChaCha8Rng) -> CameraImage {
    let (w, h) = (config.image_width, config.image_height);
    let top = [0.55f32, 0.65, 0.80];
    let bottom = [0.30f32, 0.30, 0.32];
    let mut image = CameraImage::from_fn(w, h, |_, y| {
        let t = y as f32 / h.max(2) as f32;
        [0, 1, 2].map(|k| top[k] * (1.0 - t) + bottom[k] * t)
    });
    let mut zbuf = vec![f64::INFINITY; w * h];
    let reg = labels.registry();

    // One brightness jitter per instance.
    let mut jitter = std::collections::HashMap::new();
    let mut ids: Vec<u32> = labels.ids().to_vec();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        jitter.insert(id, rng.gen_range(-0.08f32..0.08));
    }
    let color_noise = Normal::new(0.0f32, 0.03).expect("valid sigma");

    let projections = project_points(cloud, &config.calib, w, h);
    for (i, proj) in projections.iter().enumerate() {
        let Some((px, py)) = proj.pixel() else { continue };
        let class = labels.class_of(i);
        let base = class_color(reg, class);
        let shade = 1.0 - 0.2 * (proj.depth / (config.extent + 3.0)).min(1.0) as f32
            + jitter[&labels.ids()[i]];
        let color = base.map(|c| (c * shade + color_noise.sample(rng)).clamp(0.0, 1.0));
        let radius = (10.0 / proj.depth).round().clamp(1.0, 3.0) as i64;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy > radius * radius {
                    continue;
                }
                let (x, y) = (px as i64 + dx, py as i64 + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let o = y as usize * w + x as usize;
                // Splat centers always win over neighboring splat skirts.
                let depth = proj.depth + if dx == 0 && dy == 0 { 0.0 } else { 0.25 };
                if depth < zbuf[o] {
                    zbuf[o] = depth;
                    image.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    image
}

/// Applies image darkening/noise, LiDAR feature noise and point removal.
/// Surviving points keep their labels; the result never gains points.
pub fn apply_domain_shift(frame: &Frame, shift: &ShiftParams, seed: u64) -> Result<Frame> {
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut image = frame.image.clone();
    if shift.image_gamma != 1.0 {
        let g = shift.image_gamma as f32;
        image.map_values(|v| v.powf(g));
    }
    if shift.image_noise_sigma > 0.0 {
        let n = Normal::new(0.0f32, shift.image_noise_sigma as f32).expect("valid sigma");
        image.map_values(|v| v + n.sample(&mut rng));
    }

    let keep: Vec<usize> = (0..frame.len())
        .filter(|&i| {
            let beam_ok = beam_kept(beam_of(frame.cloud.positions()[i]), shift.beam_keep_fraction);
            let survive = shift.point_drop_prob == 0.0 || rng.gen::<f64>() >= shift.point_drop_prob;
            beam_ok && survive
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut cloud = frame.cloud.select(&keep)?;
    if shift.feature_noise_sigma > 0.0 {
        let n = Normal::new(0.0, shift.feature_noise_sigma).expect("valid sigma");
        for v in cloud.features_mut() {
            *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let labels = frame.labels.as_ref().map(|l| l.select(&keep));
    Frame::new(cloud, image, frame.calib.clone(), labels)
}

/// Parameters of the synthetic 2D proposal generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Probability that a proposal carries a wrong thing class.
    pub p_flip: f64,
    pub dilation_px: usize,
    pub erosion_px: usize,
    pub confidence: (f64, f64),
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            p_flip: 0.1,
            dilation_px: 2,
            erosion_px: 1,
            confidence: (0.5, 1.0),
        }
    }
}

/// Stand-in for open-vocabulary detection + promptable segmentation: one 2D
/// mask per visible ground-truth thing instance, morphologically perturbed and
/// with its label flipped with probability `p_flip`.
pub fn oracle_proposals(frame: &Frame, params: &OracleParams, seed: u64) -> Result<Vec<Proposal2d>> {
    let labels = frame.labels()?;
    let reg = labels.registry();
    let things: Vec<u32> = reg.things().collect();
    let (w, h) = (frame.image.width(), frame.image.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, mask) in labels.segments() {
        let class = id / crate::panoptic::INSTANCE_BASE;
        if !reg.is_thing(class) {
            continue;
        }
        let mut pix = vec![false; w * h];
        let mut any = false;
        for i in mask.iter() {
            let proj = project_point(frame.cloud.positions()[i], &frame.calib, w, h);
            if let Some((x, y)) = proj.pixel() {
                pix[y * w + x] = true;
                any = true;
            }
        }
        if !any {
            continue;
        }
        let pix = erode(&dilate(&pix, w, h, params.dilation_px), w, h, params.erosion_px);
        let mut label = class;
        if things.len() > 1 && rng.gen::<f64>() < params.p_flip {
            let others: Vec<u32> = things.iter().copied().filter(|&c| c != class).collect();
            label = *others.choose(&mut rng).expect("another thing class");
        }
        let (lo, hi) = params.confidence;
        let confidence = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        out.push(Proposal2d {
            mask: pix,
            label,
            confidence,
        });
    }
    Ok(out)
}

fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, true)
}

fn erode(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, false)
}

/// Square structuring element of half-size `r`; pixels outside the image count
/// as background for erosion. Only the bounding box of the mask (padded by
/// `r`) can change, so the scan is restricted to it.
fn morph(mask: &[bool], w: usize, h: usize, r: usize, grow: bool) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; w * h];
    let Some((x0, y0, x1, y1)) = bbox(mask, w) else {
        return out;
    };
    let (x0, y0) = (x0.saturating_sub(r), y0.saturating_sub(r));
    let (x1, y1) = ((x1 + r).min(w - 1), (y1 + r).min(h - 1));
    let r = r as i64;
    for y in y0 as i64..=y1 as i64 {
        for x in x0 as i64..=x1 as i64 {
            let mut hit = !grow;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    let v = xx >= 0
                        && yy >= 0
                        && xx < w as i64
                        && yy < h as i64
                        && mask[yy as usize * w + xx as usize];
                    if grow && v {
                        hit = true;
                        break 'scan;
                    }
                    if !grow && !v {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            out[y as usize * w + x as usize] = hit;
        }
    }
    out
}

fn bbox(mask: &[bool], w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        b = Some(match b {
            None => (x, y, x, y),
            Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
        });
    }
    b
}

/// Frames `0..count` generated from per-frame seeds derived from `base.seed`.
pub fn generate_frames(base: &SceneConfig, count: usize) -> Result<Vec<Frame>> {
    (0..count)
        .map(|i| {
            let cfg = SceneConfig {
                seed: derive_seed(base.seed, i as u64),
                ..base.clone()
            };
            generate_scene(&cfg)
        })
        .collect()
}
