//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use panda_core::camera::Calibration;
use panda_core::synth::{SceneConfig, ShiftParams};
use panda_core::trainer::{RefineMode, TrainConfig};

use crate::CliError;

/// Every parameter a command can read. Defaults follow the library defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Frames per split written by `gen`.
    pub frames: usize,
    pub scene: SceneConfig,
    pub shift: ShiftParams,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            frames: 20,
            scene: SceneConfig::default(),
            shift: ShiftParams::desk_standard(),
            train: TrainConfig::default(),
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(f64, usize, u64, bool);

impl Value for Option<usize> {
    fn parse(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl Value for RefineMode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(RefineMode::Full),
            "filter" => Some(RefineMode::FilterOnly),
            _ => None,
        }
    }
    fn show(&self) -> String {
        match self {
            RefineMode::Full => "full",
            RefineMode::FilterOnly => "filter",
        }
        .into()
    }
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Option<()>,
}

macro_rules! field {
    ($key:literal, $c:ident => $place:expr) => {
        Field {
            key: $key,
            get: |$c: &RunConfig| Value::show(&$place),
            set: |$c: &mut RunConfig, v: &str| {
                $place = Value::parse(v)?;
                Some(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("seed", c => c.seed),
    field!("frames", c => c.frames),
    field!("objects_min", c => c.scene.objects.0),
    field!("objects_max", c => c.scene.objects.1),
    field!("extent", c => c.scene.extent),
    field!("points_min", c => c.scene.points_per_object.0),
    field!("points_max", c => c.scene.points_per_object.1),
    field!("ground_points", c => c.scene.ground_points),
    field!("wall_points", c => c.scene.wall_points),
    field!("ground_noise", c => c.scene.ground_noise),
    field!("sensor_height", c => c.scene.sensor_height),
    field!("clearance", c => c.scene.clearance),
    field!("image_width", c => c.scene.image_width),
    field!("image_height", c => c.scene.image_height),
    field!("gamma", c => c.shift.image_gamma),
    field!("image_noise", c => c.shift.image_noise_sigma),
    field!("point_drop", c => c.shift.point_drop_prob),
    field!("beam_keep", c => c.shift.beam_keep_fraction),
    field!("feature_noise", c => c.shift.feature_noise_sigma),
    field!("r2d_bd", c => c.train.ratios.r2d_bd),
    field!("r3d_bd", c => c.train.ratios.r3d_bd),
    field!("r2d_ins", c => c.train.ratios.r2d_ins),
    field!("r3d_ins", c => c.train.ratios.r3d_ins),
    field!("patch_size", c => c.train.ratios.patch_size),
    field!("modality_prob", c => c.train.ratios.modality_prob),
    field!("edge_fraction_min", c => c.train.ratios.edge_fraction_min),
    field!("canny_low", c => c.train.ratios.canny_low),
    field!("canny_high", c => c.train.ratios.canny_high),
    field!("tau_th", c => c.train.thresholds.tau_th),
    field!("stuff_keep_fraction", c => c.train.thresholds.stuff_keep_fraction),
    field!("t_cls", c => c.train.thresholds.t_cls),
    field!("iou_min", c => c.train.thresholds.iou_min),
    field!("hidden", c => c.train.hidden),
    field!("lr", c => c.train.lr),
    field!("pretrain_iterations", c => c.train.pretrain_iterations),
    field!("epochs", c => c.train.epochs),
    field!("iterations", c => c.train.iterations),
    field!("batch_size", c => c.train.batch_size),
    field!("ema_momentum", c => c.train.ema_momentum),
    field!("eval_interval", c => c.train.eval_interval),
    field!("use_amd", c => c.train.use_amd),
    field!("refine", c => c.train.refine),
    field!("cluster_eps", c => c.train.cluster.eps),
    field!("cluster_min_pts", c => c.train.cluster.min_pts),
    field!("ransac_iterations", c => c.train.ransac.iterations),
    field!("ransac_threshold", c => c.train.ransac.inlier_threshold),
    field!("oracle_p_flip", c => c.train.oracle.p_flip),
    field!("oracle_dilation", c => c.train.oracle.dilation_px),
    field!("oracle_erosion", c => c.train.oracle.erosion_px),
    field!("oracle_conf_min", c => c.train.oracle.confidence.0),
    field!("oracle_conf_max", c => c.train.oracle.confidence.1),
];

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        FIELDS.iter().map(|f| f.key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        FIELDS.iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let f = FIELDS
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| CliError::Input(format!("unknown config key `{key}`")))?;
        (f.set)(self, value).ok_or_else(|| CliError::Input(format!("bad value `{value}` for `{key}`")))?;
        if key == "image_width" || key == "image_height" {
            self.scene.calib = Calibration::forward_facing(self.scene.image_width, self.scene.image_height);
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    /// Reads `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.apply(line)
                .map_err(|e| CliError::Input(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    /// Every key with its effective value, one per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for f in FIELDS {
            let _ = writeln!(s, "{} = {}", f.key, (f.get)(self));
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.shift.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..self.scene.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let mut c = RunConfig::default();
        c.apply("lr=0.123456789").unwrap();
        c.apply("iterations = 7").unwrap();
        c.apply("refine=filter").unwrap();
        c.apply("image_width=200").unwrap();
        c.apply("gamma=1.7").unwrap();
        assert_eq!(RunConfig::parse(&c.dump()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().dump()).unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::default();
        for (k, v) in [
            ("tau_th", "0.63"),
            ("t_cls", "0.2"),
            ("r2d_bd", "0.5"),
            ("r3d_bd", "0.7"),
            ("patch_size", "32"),
            ("ema_momentum", "0.99"),
            ("iou_min", "0.5"),
        ] {
            assert_eq!(c.get(k).as_deref(), Some(v), "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("frames = many").is_err());
        assert!(RunConfig::parse("frames").is_err());
        let c = RunConfig::parse("# comment\n\nframes = 3 # trailing\n").unwrap();
        assert_eq!(c.frames, 3);
    }

    #[test]
    fn every_key_is_listed_once() {
        let mut keys: Vec<_> = RunConfig::keys().collect();
        let n = keys.len();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), n);
        assert_eq!(RunConfig::default().dump().lines().count(), n);
    }

    #[test]
    fn image_size_keeps_calibration_in_sync() {
        let mut c = RunConfig::default();
        c.apply("image_height=100").unwrap();
        assert_eq!(c.scene.calib, Calibration::forward_facing(c.scene.image_width, 100));
    }
}
