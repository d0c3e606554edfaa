//! Model configuration and the flat `key = value` run-config file.
//!
//! A run config is a single TOML table with no sections. Every key is
//! optional; missing keys take the defaults below. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `input_width`, `input_height` | training input size (px, divisible by 32) |
//! | `eval_width`, `eval_height` | evaluation / inference input size |
//! | `stage_channels` | encoder channels for the 4 stages |
//! | `blocks_per_stage` | aggregation blocks per encoder stage |
//! | `group_count` | groups of the grouped 3×3 convolutions |
//! | `num_classes` | detection classes |
//! | `anchors` | 9 `[w, h]` pairs in px, 3 per stride, ascending area |
//! | `auto_anchors` | re-fit anchors by k-means on the training boxes |
//! | `spp_kernels` | max-pool kernel sizes of the pyramid pooling block |
//! | `use_mosaic`, `use_mixup`, `use_flip`, `use_hsv` | augmentation toggles |
//! | `mosaic_prob`, `mixup_prob`, `close_mosaic_epochs` | augmentation schedule |
//! | `lane_decoder` | `"transposed_conv"` or `"nearest_upsample"` |
//! | `lane_loss` | `"focal"` or `"focal_plus_dice"` |
//! | `initial_lr`, `final_lr_fraction`, `warmup_epochs`, `total_epochs`, `momentum`, `weight_decay`, `batch_size`, `seed`, `eval_every`, `schedule` | training loop |
//! | `alpha_class`, `alpha_obj`, `alpha_box`, `gamma_tradeoff`, `tversky_alpha`, `tversky_beta`, `focal_gamma`, `seg_eps` | loss weights |
//! | `conf_threshold`, `nms_iou_threshold`, `eval_conf_threshold` | post-processing |
//! | `train_lane_width`, `test_lane_width` | lane mask widths (px) |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::training::{Schedule, TrainConfig};

/// Output strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;
/// Deepest stride; input sizes must be multiples of it.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneDecoderKind {
    NearestUpsample,
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneLossKind {
    Focal,
    FocalPlusDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (width, height) in px.
    pub input_size: (usize, usize),
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub group_count: usize,
    pub num_classes: usize,
    /// 3 scales × 3 anchors of (w, h) px, smallest stride first.
    pub anchor_sizes: Vec<[f64; 2]>,
    pub spp_kernels: Vec<usize>,
    pub use_mosaic: bool,
    pub use_mixup: bool,
    pub lane_decoder_kind: LaneDecoderKind,
    pub lane_loss_kind: LaneLossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (640, 384),
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            group_count: 2,
            num_classes: 1,
            anchor_sizes: default_anchors(),
            spp_kernels: vec![5, 9, 13],
            use_mosaic: true,
            use_mixup: true,
            lane_decoder_kind: LaneDecoderKind::TransposedConv,
            lane_loss_kind: LaneLossKind::FocalPlusDice,
        }
    }
}

/// Anchor priors for 640-px inputs.
pub fn default_anchors() -> Vec<[f64; 2]> {
    vec![
        [10.0, 13.0],
        [16.0, 30.0],
        [33.0, 23.0],
        [30.0, 61.0],
        [62.0, 45.0],
        [59.0, 119.0],
        [116.0, 90.0],
        [156.0, 198.0],
        [373.0, 326.0],
    ]
}

impl ModelConfig {
    /// A narrow variant for CPU-scale experiments on small synthetic scenes.
    pub fn compact(width: usize, height: usize) -> Self {
        Self {
            input_size: (width, height),
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            anchor_sizes: vec![
                [8.0, 6.0],
                [12.0, 10.0],
                [18.0, 12.0],
                [20.0, 18.0],
                [28.0, 20.0],
                [32.0, 28.0],
                [40.0, 32.0],
                [52.0, 40.0],
                [72.0, 56.0],
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.input_size;
        check_input_size(w, h)?;
        if self.stage_channels.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 encoder stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.group_count == 0 {
            return Err(Error::Config("group_count must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        for &c in &self.stage_channels {
            // The aggregation blocks split channels in half before grouping.
            if c % (2 * self.group_count) != 0 || c < 16 {
                return Err(Error::Config(format!(
                    "stage channels {c} must be >= 16 and divisible by 2 x group_count ({})",
                    self.group_count
                )));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.anchor_sizes.len() != STRIDES.len() * ANCHORS_PER_SCALE {
            return Err(Error::Config(format!(
                "need {} anchors, got {}",
                STRIDES.len() * ANCHORS_PER_SCALE,
                self.anchor_sizes.len()
            )));
        }
        if self.anchor_sizes.iter().any(|a| !(a[0] > 0.0 && a[1] > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        for &k in &self.spp_kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("pooling kernel {k} must be odd and >= 1")));
            }
        }
        Ok(())
    }
}

pub fn check_input_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width % MAX_STRIDE != 0 || height % MAX_STRIDE != 0 {
        return Err(Error::Input(format!(
            "input size {width}x{height} must be positive multiples of {MAX_STRIDE}"
        )));
    }
    Ok(())
}

/// Everything a run needs, read from one flat config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub eval_width: usize,
    pub eval_height: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub group_count: usize,
    pub num_classes: usize,
    pub anchors: Vec<[f64; 2]>,
    pub auto_anchors: bool,
    pub spp_kernels: Vec<usize>,
    pub use_mosaic: bool,
    pub use_mixup: bool,
    pub use_flip: bool,
    pub use_hsv: bool,
    pub mosaic_prob: f64,
    pub mixup_prob: f64,
    pub close_mosaic_epochs: usize,
    pub lane_decoder: LaneDecoderKind,
    pub lane_loss: LaneLossKind,

    pub initial_lr: f64,
    pub final_lr_fraction: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub schedule: Schedule,

    pub alpha_class: f64,
    pub alpha_obj: f64,
    pub alpha_box: f64,
    pub gamma_tradeoff: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub focal_gamma: f64,
    pub seg_eps: f64,

    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub eval_conf_threshold: f64,
    pub train_lane_width: u32,
    pub test_lane_width: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let loss = LossWeights::default();
        Self {
            input_width: 640,
            input_height: 640,
            eval_width: 640,
            eval_height: 384,
            stage_channels: model.stage_channels,
            blocks_per_stage: model.blocks_per_stage,
            group_count: model.group_count,
            num_classes: model.num_classes,
            anchors: model.anchor_sizes,
            auto_anchors: false,
            spp_kernels: model.spp_kernels,
            use_mosaic: model.use_mosaic,
            use_mixup: model.use_mixup,
            use_flip: train.augment.use_flip,
            use_hsv: train.augment.use_hsv,
            mosaic_prob: train.augment.mosaic_prob,
            mixup_prob: train.augment.mixup_prob,
            close_mosaic_epochs: train.augment.close_mosaic_epochs,
            lane_decoder: model.lane_decoder_kind,
            lane_loss: model.lane_loss_kind,
            initial_lr: train.initial_lr,
            final_lr_fraction: train.final_lr_fraction,
            warmup_epochs: train.warmup_epochs,
            total_epochs: train.total_epochs,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            seed: train.seed,
            eval_every: train.eval_every,
            schedule: train.schedule,
            alpha_class: loss.alpha_class,
            alpha_obj: loss.alpha_obj,
            alpha_box: loss.alpha_box,
            gamma_tradeoff: loss.gamma_tradeoff,
            tversky_alpha: loss.tversky_alpha,
            tversky_beta: loss.tversky_beta,
            focal_gamma: loss.focal_gamma,
            seg_eps: loss.seg_eps,
            conf_threshold: train.conf_threshold,
            nms_iou_threshold: train.nms_iou_threshold,
            eval_conf_threshold: train.eval_conf_threshold,
            train_lane_width: 8,
            test_lane_width: 2,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        check_input_size(self.eval_width, self.eval_height)?;
        self.train().validate()?;
        self.loss_weights().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_size: (self.input_width, self.input_height),
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            group_count: self.group_count,
            num_classes: self.num_classes,
            anchor_sizes: self.anchors.clone(),
            spp_kernels: self.spp_kernels.clone(),
            use_mosaic: self.use_mosaic,
            use_mixup: self.use_mixup,
            lane_decoder_kind: self.lane_decoder,
            lane_loss_kind: self.lane_loss,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let mut t = TrainConfig {
            initial_lr: self.initial_lr,
            final_lr_fraction: self.final_lr_fraction,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            schedule: self.schedule,
            eval_size: (self.eval_width, self.eval_height),
            conf_threshold: self.conf_threshold,
            nms_iou_threshold: self.nms_iou_threshold,
            eval_conf_threshold: self.eval_conf_threshold,
            auto_anchors: self.auto_anchors,
            ..TrainConfig::default()
        };
        t.augment.use_mosaic = self.use_mosaic;
        t.augment.use_mixup = self.use_mixup;
        t.augment.use_flip = self.use_flip;
        t.augment.use_hsv = self.use_hsv;
        t.augment.mosaic_prob = self.mosaic_prob;
        t.augment.mixup_prob = self.mixup_prob;
        t.augment.close_mosaic_epochs = self.close_mosaic_epochs;
        t
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_class: self.alpha_class,
            alpha_obj: self.alpha_obj,
            alpha_box: self.alpha_box,
            gamma_tradeoff: self.gamma_tradeoff,
            tversky_alpha: self.tversky_alpha,
            tversky_beta: self.tversky_beta,
            focal_gamma: self.focal_gamma,
            seg_eps: self.seg_eps,
        }
    }

    pub fn lane_width(&self, split: crate::data::Split) -> u32 {
        match split {
            crate::data::Split::Train => self.train_lane_width,
            _ => self.test_lane_width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::compact(256, 160).validate().unwrap();
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::default();
        c.input_size = (650, 384);
        assert!(matches!(c.validate(), Err(Error::Input(_))));
        let mut c = ModelConfig::default();
        c.anchor_sizes.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.group_count = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.spp_kernels = vec![5, 8];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn flat_file_round_trip_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.lane_decoder = LaneDecoderKind::NearestUpsample;
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::parse("batch_size = 3\nlane_loss = \"focal\"\n").unwrap();
        assert_eq!(partial.batch_size, 3);
        assert_eq!(partial.lane_loss, LaneLossKind::Focal);
        assert!(RunConfig::parse("no_such_key = 1").is_err());
    }
}
