//! Cumulative ablation runs: each row switches one more component on and is
//! trained from scratch with the same seed, data and schedule.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{LaneDecoderKind, LaneLossKind, ModelConfig};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricReport;
use crate::training::{evaluate, fit, EvalOptions, FitOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub mosaic_mixup: bool,
    pub lane_decoder: LaneDecoderKind,
    pub lane_loss: LaneLossKind,
}

/// Baseline, then mosaic and mixup, then the transposed-conv lane decoder,
/// then the focal + dice lane loss.
pub fn standard_variants() -> Vec<AblationVariant> {
    let base = AblationVariant {
        name: "Baseline".into(),
        mosaic_mixup: false,
        lane_decoder: LaneDecoderKind::NearestUpsample,
        lane_loss: LaneLossKind::Focal,
    };
    let mosaic = AblationVariant {
        name: "+ Mosaic & Mixup".into(),
        mosaic_mixup: true,
        ..base.clone()
    };
    let deconv = AblationVariant {
        name: "+ Transposed conv".into(),
        lane_decoder: LaneDecoderKind::TransposedConv,
        ..mosaic.clone()
    };
    let dice = AblationVariant {
        name: "+ Focal & Dice".into(),
        lane_loss: LaneLossKind::FocalPlusDice,
        ..deconv.clone()
    };
    vec![base, mosaic, deconv, dice]
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    /// One sub-directory per variant is created here.
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub variants: Vec<AblationVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_images: usize,
    pub val_images: usize,
    pub epochs: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

fn delta(cur: Option<f64>, prev: Option<f64>) -> String {
    match (cur, prev) {
        (Some(c), Some(p)) => format!("{:+.1}", 100.0 * (c - p)),
        _ => "-".into(),
    }
}

impl AblationReport {
    /// Change in validation mAP50 from the previous row.
    pub fn map50_deltas(&self) -> Vec<Option<f64>> {
        let mut out = vec![None];
        for w in self.rows.windows(2) {
            out.push(w[1].report.map50.zip(w[0].report.map50).map(|(c, p)| c - p));
        }
        out.truncate(self.rows.len());
        out
    }

    /// Every row carries all five metrics.
    pub fn is_complete(&self) -> bool {
        !self.rows.is_empty()
            && self.rows.iter().all(|r| {
                let m = &r.report;
                m.map50.is_some()
                    && m.recall.is_some()
                    && m.drivable_miou.is_some()
                    && m.lane_accuracy.is_some()
                    && m.lane_iou.is_some()
            })
    }

    pub fn to_table(&self) -> String {
        let header = ["Method", "mAP50", "Recall", "Drivable mIoU", "Accuracy", "Lane IoU", "d mAP50", "d Lane IoU"];
        let mut rows = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| &self.rows[j].report);
            let m = &r.report;
            rows.push([
                r.variant.name.clone(),
                pct(m.map50),
                pct(m.recall),
                pct(m.drivable_miou),
                pct(m.lane_accuracy),
                pct(m.lane_iou),
                delta(m.map50, prev.and_then(|p| p.map50)),
                delta(m.lane_iou, prev.and_then(|p| p.lane_iou)),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "ablation: {} train / {} val images, {} epochs, seed {}\n",
            self.train_images, self.val_images, self.epochs, self.seed
        );
        let line = |out: &mut String, cells: &[String]| {
            for (c, v) in cells.iter().enumerate() {
                if c == 0 {
                    let _ = write!(out, "{:<w$}", v, w = widths[c]);
                } else {
                    let _ = write!(out, " | {:>w$}", v, w = widths[c]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &header.map(String::from));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&rule.join("-+-"));
        out.push('\n');
        for r in &rows {
            line(&mut out, r);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Train and evaluate one variant.
pub fn run_variant(
    variant: &AblationVariant,
    train: &DatasetManifest,
    val: &DatasetManifest,
    opts: &AblationOptions,
) -> Result<MetricReport> {
    let model = ModelConfig {
        use_mosaic: variant.mosaic_mixup,
        use_mixup: variant.mosaic_mixup,
        lane_decoder_kind: variant.lane_decoder,
        lane_loss_kind: variant.lane_loss,
        ..opts.model.clone()
    };
    let mut train_cfg = opts.train.clone();
    train_cfg.augment.use_mosaic = variant.mosaic_mixup;
    train_cfg.augment.use_mixup = variant.mosaic_mixup;
    train_cfg.eval_every = 0;
    let slug: String = variant
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    let fit_opts = FitOptions::new(opts.run_dir.join(slug.trim_matches('_')), model, train_cfg.clone(), opts.loss);
    let out = fit(train, &fit_opts)?;
    evaluate(&out.model, val, &EvalOptions::from_train(&train_cfg))
}

pub fn run_ablation(train: &DatasetManifest, val: &DatasetManifest, opts: &AblationOptions) -> Result<AblationReport> {
    if val.is_empty() {
        return Err(Error::Input("ablation needs a non-empty validation split".into()));
    }
    let mut rows = Vec::new();
    for v in &opts.variants {
        log::info!("ablation variant {}", v.name);
        let report = run_variant(v, train, val, opts)?;
        rows.push(AblationRow {
            variant: v.clone(),
            report,
        });
    }
    Ok(AblationReport {
        train_images: train.len(),
        val_images: val.len(),
        epochs: opts.train.total_epochs,
        seed: opts.train.seed,
        rows,
    })
}
