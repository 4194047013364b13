//! Flat `key=value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines ignored. Unknown keys
//! are rejected rather than silently dropped so a typo can't run a different
//! experiment than the one asked for.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Convex elementwise blend of the two modality maps.
    WeightedSum,
    /// Stack the gate-scaled maps along channels; the reduce conv mixes them.
    ConcatReduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletSource {
    /// Triplets built within each sample's own embeddings.
    SameSample,
    /// Hardest negative in the batch by embedding distance.
    BatchHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IllumDist {
    /// Day/night mixture: half the scenes near-dark, half in full light.
    Bimodal,
    /// Illumination drawn uniformly from [illum_min, illum_max].
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    /// Channel widths of the three pyramid levels, finest first.
    pub widths: [usize; 3],
    pub reduce_ratio: usize,
    pub fusion_mode: FusionMode,
    pub gate_hidden: usize,
    /// Infrared term weight inside the orthogonality objective.
    pub lambda: f32,
    /// Weight of the orthogonality (decoupling) objective in the joint loss.
    pub lambda1: f32,
    /// Weight of the triplet (contrastive) objective in the joint loss.
    pub lambda2: f32,
    pub margin: f32,
    pub anchor_modality: TripletSource,
    pub num_classes: usize,
    /// Anchor (w, h) priors in cell units, shared across levels.
    pub anchors: Vec<(f32, f32)>,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Run validation every N epochs (0 = only at the end).
    pub eval_every: usize,
    pub conf_threshold: f32,
    pub eval_conf_threshold: f32,
    pub nms_iou: f32,
    pub max_dets: usize,
    // synthetic data generation
    pub num_samples: usize,
    pub ped_min: f32,
    pub ped_max: f32,
    pub noise_level: f32,
    pub ir_noise_level: f32,
    pub illum_min: f32,
    pub illum_max: f32,
    pub illum_dist: IllumDist,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            image_size: 64,
            widths: [16, 32, 32],
            reduce_ratio: 2,
            fusion_mode: FusionMode::WeightedSum,
            gate_hidden: 16,
            lambda: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
            margin: 0.2,
            anchor_modality: TripletSource::SameSample,
            num_classes: 1,
            anchors: vec![(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)],
            lr: 0.001,
            epochs: 50,
            batch_size: 8,
            weight_decay: 0.0005,
            warmup_epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 0,
            conf_threshold: 0.25,
            eval_conf_threshold: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            num_samples: 128,
            ped_min: 0.12,
            ped_max: 0.35,
            noise_level: 12.0,
            ir_noise_level: 18.0,
            illum_min: 0.05,
            illum_max: 1.0,
            illum_dist: IllumDist::Bimodal,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Usage(format!("config key {key}: cannot parse value {value:?}"))
}

fn pf32(key: &str, v: &str) -> Result<f32> {
    v.parse().map_err(|_| bad(key, v))
}

fn pusize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v))
}

impl Config {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v))?,
            "image_size" => self.image_size = pusize(key, v)?,
            "widths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| pusize(key, p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Usage(format!(
                        "config key widths: expected 3 comma-separated values, got {}",
                        parts.len()
                    )));
                }
                self.widths = [parts[0], parts[1], parts[2]];
            }
            "reduce_ratio" => self.reduce_ratio = pusize(key, v)?,
            "fusion_mode" => {
                self.fusion_mode = match v {
                    "weighted_sum" => FusionMode::WeightedSum,
                    "concat_reduce" => FusionMode::ConcatReduce,
                    _ => return Err(bad(key, v)),
                }
            }
            "gate_hidden" => self.gate_hidden = pusize(key, v)?,
            "lambda" => self.lambda = pf32(key, v)?,
            "lambda1" => self.lambda1 = pf32(key, v)?,
            "lambda2" => self.lambda2 = pf32(key, v)?,
            "margin" => self.margin = pf32(key, v)?,
            "anchor_modality" => {
                self.anchor_modality = match v {
                    "same_sample" => TripletSource::SameSample,
                    "batch_hard" => TripletSource::BatchHard,
                    _ => return Err(bad(key, v)),
                }
            }
            "num_classes" => self.num_classes = pusize(key, v)?,
            "anchors" => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let (w, h) = part
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| bad(key, v))?;
                    out.push((pf32(key, w.trim())?, pf32(key, h.trim())?));
                }
                if out.is_empty() {
                    return Err(bad(key, v));
                }
                self.anchors = out;
            }
            "learning_rate" | "lr" => self.lr = pf32(key, v)?,
            "epochs" => self.epochs = pusize(key, v)?,
            "batch_size" => self.batch_size = pusize(key, v)?,
            "weight_decay" => self.weight_decay = pf32(key, v)?,
            "warmup_epochs" => self.warmup_epochs = pusize(key, v)?,
            "beta1" => self.beta1 = pf32(key, v)?,
            "beta2" => self.beta2 = pf32(key, v)?,
            "eps" => self.eps = pf32(key, v)?,
            "eval_every" => self.eval_every = pusize(key, v)?,
            "conf_threshold" => self.conf_threshold = pf32(key, v)?,
            "eval_conf_threshold" => self.eval_conf_threshold = pf32(key, v)?,
            "nms_iou" => self.nms_iou = pf32(key, v)?,
            "max_dets" => self.max_dets = pusize(key, v)?,
            "num_samples" => self.num_samples = pusize(key, v)?,
            "ped_min" => self.ped_min = pf32(key, v)?,
            "ped_max" => self.ped_max = pf32(key, v)?,
            "noise_level" => self.noise_level = pf32(key, v)?,
            "ir_noise_level" => self.ir_noise_level = pf32(key, v)?,
            "illum_min" => self.illum_min = pf32(key, v)?,
            "illum_max" => self.illum_max = pf32(key, v)?,
            "illum_dist" => {
                self.illum_dist = match v {
                    "bimodal" => IllumDist::Bimodal,
                    "uniform" => IllumDist::Uniform,
                    _ => return Err(bad(key, v)),
                }
            }
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Serializes every key; `parse(to_kv())` reproduces the config exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "image_size", self.image_size.to_string());
        kv(
            &mut s,
            "widths",
            format!("{},{},{}", self.widths[0], self.widths[1], self.widths[2]),
        );
        kv(&mut s, "reduce_ratio", self.reduce_ratio.to_string());
        kv(
            &mut s,
            "fusion_mode",
            match self.fusion_mode {
                FusionMode::WeightedSum => "weighted_sum".into(),
                FusionMode::ConcatReduce => "concat_reduce".into(),
            },
        );
        kv(&mut s, "gate_hidden", self.gate_hidden.to_string());
        kv(&mut s, "lambda", self.lambda.to_string());
        kv(&mut s, "lambda1", self.lambda1.to_string());
        kv(&mut s, "lambda2", self.lambda2.to_string());
        kv(&mut s, "margin", self.margin.to_string());
        kv(
            &mut s,
            "anchor_modality",
            match self.anchor_modality {
                TripletSource::SameSample => "same_sample".into(),
                TripletSource::BatchHard => "batch_hard".into(),
            },
        );
        kv(&mut s, "num_classes", self.num_classes.to_string());
        kv(
            &mut s,
            "anchors",
            self.anchors
                .iter()
                .map(|(w, h)| format!("{w}x{h}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(&mut s, "learning_rate", self.lr.to_string());
        kv(&mut s, "epochs", self.epochs.to_string());
        kv(&mut s, "batch_size", self.batch_size.to_string());
        kv(&mut s, "weight_decay", self.weight_decay.to_string());
        kv(&mut s, "warmup_epochs", self.warmup_epochs.to_string());
        kv(&mut s, "beta1", self.beta1.to_string());
        kv(&mut s, "beta2", self.beta2.to_string());
        kv(&mut s, "eps", self.eps.to_string());
        kv(&mut s, "eval_every", self.eval_every.to_string());
        kv(&mut s, "conf_threshold", self.conf_threshold.to_string());
        kv(
            &mut s,
            "eval_conf_threshold",
            self.eval_conf_threshold.to_string(),
        );
        kv(&mut s, "nms_iou", self.nms_iou.to_string());
        kv(&mut s, "max_dets", self.max_dets.to_string());
        kv(&mut s, "num_samples", self.num_samples.to_string());
        kv(&mut s, "ped_min", self.ped_min.to_string());
        kv(&mut s, "ped_max", self.ped_max.to_string());
        kv(&mut s, "noise_level", self.noise_level.to_string());
        kv(&mut s, "ir_noise_level", self.ir_noise_level.to_string());
        kv(&mut s, "illum_min", self.illum_min.to_string());
        kv(&mut s, "illum_max", self.illum_max.to_string());
        kv(
            &mut s,
            "illum_dist",
            match self.illum_dist {
                IllumDist::Bimodal => "bimodal".into(),
                IllumDist::Uniform => "uniform".into(),
            },
        );
        s
    }

    /// Grid stride of each pyramid level, finest first.
    pub fn strides(&self) -> [usize; 3] {
        [8, 16, 32]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || s % 32 != 0 {
            return Err(Error::Usage(format!(
                "image_size must be a positive multiple of 32, got {s}"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Usage("num_classes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Usage(format!(
                "nms_iou must lie in [0, 1], got {}",
                self.nms_iou
            )));
        }
        if self.ped_min <= 0.0 || self.ped_max > 1.0 || self.ped_min > self.ped_max {
            return Err(Error::Usage(format!(
                "pedestrian size range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.ped_min, self.ped_max
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Usage(format!(
                "learning_rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Usage(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}
