//! Detection, drivable-area and lane heads plus detection post-processing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::backbone::{check_strides, FeatureMap, PyramidFeatures};
use crate::config::{LaneDecoderKind, ModelConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::error::{Error, Result};
use crate::metrics::iou_box;
use crate::nn::{Conv2d, ConvBnAct, ConvTranspose2d};
use crate::tensor::{sigmoid, Element, Tensor};

/// `[x1, y1, x2, y2]` in pixels.
pub type BoxXyxy = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// `per_scale[s][a] = [w, h]` px for stride `STRIDES[s]`.
    pub per_scale: [[[f64; 2]; ANCHORS_PER_SCALE]; 3],
}

impl AnchorSet {
    pub fn from_sizes(sizes: &[[f64; 2]]) -> Result<Self> {
        if sizes.len() != STRIDES.len() * ANCHORS_PER_SCALE {
            return Err(Error::Config(format!("need 9 anchors, got {}", sizes.len())));
        }
        if sizes.iter().any(|s| !(s[0] > 0.0 && s[1] > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        let mut per_scale = [[[0.0; 2]; ANCHORS_PER_SCALE]; 3];
        for (i, s) in sizes.iter().enumerate() {
            per_scale[i / ANCHORS_PER_SCALE][i % ANCHORS_PER_SCALE] = *s;
        }
        Ok(Self { per_scale })
    }

    pub fn strides(&self) -> [usize; 3] {
        STRIDES
    }
}

/// One decoded box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
}

/// Per-scale predictions laid out as `(batch, anchor, grid_y, grid_x, 5 + classes)`
/// with channels `(tx, ty, tw, th, objectness, class logits...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetectionOutput {
    pub scales: Vec<Tensor<f64>>,
    pub num_classes: usize,
}

impl RawDetectionOutput {
    pub fn from_head_outputs<T: Element>(maps: &[Tensor<T>], num_classes: usize) -> Self {
        Self {
            scales: maps.iter().map(|m| to_detection_layout(m, num_classes)).collect(),
            num_classes,
        }
    }

    /// Zero-filled output with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            scales: self.scales.iter().map(|s| Tensor::zeros(s.shape())).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self) -> usize {
        self.scales[0].shape()[0]
    }
}

/// `(b, A·(5+nc), h, w)` convolution output → `(b, A, h, w, 5+nc)`.
pub fn to_detection_layout<T: Element>(map: &Tensor<T>, num_classes: usize) -> Tensor<f64> {
    let (b, c, h, w) = map.dims4();
    let no = 5 + num_classes;
    assert_eq!(c, ANCHORS_PER_SCALE * no, "detection channels");
    let mut out = Tensor::zeros(&[b, ANCHORS_PER_SCALE, h, w, no]);
    let src = map.data();
    let dst = out.data_mut();
    for n in 0..b {
        for a in 0..ANCHORS_PER_SCALE {
            for k in 0..no {
                let plane = &src[((n * c) + a * no + k) * h * w..][..h * w];
                for (p, &v) in plane.iter().enumerate() {
                    dst[(((n * ANCHORS_PER_SCALE + a) * h * w) + p) * no + k] = v.as_f64();
                }
            }
        }
    }
    out
}

/// Inverse of [`to_detection_layout`].
pub fn from_detection_layout<T: Element>(t: &Tensor<f64>) -> Tensor<T> {
    let sh = t.shape();
    let (b, a_n, h, w, no) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let c = a_n * no;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let src = t.data();
    let dst = out.data_mut();
    for n in 0..b {
        for a in 0..a_n {
            for k in 0..no {
                for p in 0..h * w {
                    dst[((n * c) + a * no + k) * h * w + p] =
                        T::from_f64_lossy(src[(((n * a_n + a) * h * w) + p) * no + k]);
                }
            }
        }
    }
    out
}

/// Box centre and size decoded from raw offsets at a grid cell.
///
/// centre = (2σ(t) − 0.5 + cell) · stride, size = (2σ(t))² · anchor.
pub fn decode_cell(t: [f64; 4], cell: (usize, usize), stride: usize, anchor: [f64; 2]) -> [f64; 4] {
    let s = stride as f64;
    let cx = (2.0 * sigmoid(t[0]) - 0.5 + cell.0 as f64) * s;
    let cy = (2.0 * sigmoid(t[1]) - 0.5 + cell.1 as f64) * s;
    let w = (2.0 * sigmoid(t[2])).powi(2) * anchor[0];
    let h = (2.0 * sigmoid(t[3])).powi(2) * anchor[1];
    [cx, cy, w, h]
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_cell`]; `None` when the box is outside what the cell
/// and anchor can represent (centre offset in (−0.5, 1.5), size ratio in (0, 4)).
pub fn encode_cell(cxcywh: [f64; 4], cell: (usize, usize), stride: usize, anchor: [f64; 2]) -> Option<[f64; 4]> {
    let s = stride as f64;
    let px = (cxcywh[0] / s - cell.0 as f64 + 0.5) / 2.0;
    let py = (cxcywh[1] / s - cell.1 as f64 + 0.5) / 2.0;
    let pw = (cxcywh[2] / anchor[0]).sqrt() / 2.0;
    let ph = (cxcywh[3] / anchor[1]).sqrt() / 2.0;
    let ok = |p: f64| p > 0.0 && p < 1.0;
    (ok(px) && ok(py) && ok(pw) && ok(ph)).then(|| [logit(px), logit(py), logit(pw), logit(ph)])
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> BoxXyxy {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: BoxXyxy) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

/// Decode every cell of every scale, keeping boxes with confidence ≥ `conf_threshold`.
///
/// Confidence is σ(objectness)·σ(best class logit), clipped to the open
/// interval (0, 1). Boxes are clipped to `image_size` (w, h); boxes that
/// vanish under clipping are dropped. Returns one list per batch item.
pub fn decode_boxes(
    raw: &RawDetectionOutput,
    anchors: &AnchorSet,
    conf_threshold: f64,
    image_size: (usize, usize),
) -> Vec<Vec<Detection>> {
    let batch = raw.batch();
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let no = 5 + raw.num_classes;
    let mut out = vec![Vec::new(); batch];
    for (s, t) in raw.scales.iter().enumerate() {
        let sh = t.shape();
        let (gh, gw) = (sh[2], sh[3]);
        for (n, dets) in out.iter_mut().enumerate() {
            for a in 0..ANCHORS_PER_SCALE {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let off = (((n * ANCHORS_PER_SCALE + a) * gh + gy) * gw + gx) * no;
                        let p = &t.data()[off..off + no];
                        let obj = sigmoid(p[4]);
                        let (class_id, cls_logit) = p[5..]
                            .iter()
                            .copied()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
                        let confidence = (obj * sigmoid(cls_logit)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                        if confidence < conf_threshold {
                            continue;
                        }
                        let b = decode_cell(
                            [p[0], p[1], p[2], p[3]],
                            (gx, gy),
                            STRIDES[s],
                            anchors.per_scale[s][a],
                        );
                        let xy = cxcywh_to_xyxy(b);
                        let bbox = [
                            xy[0].clamp(0.0, iw),
                            xy[1].clamp(0.0, ih),
                            xy[2].clamp(0.0, iw),
                            xy[3].clamp(0.0, ih),
                        ];
                        if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                            dets.push(Detection {
                                class_id,
                                confidence,
                                bbox,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Greedy per-class non-maximum suppression.
///
/// Output is sorted by descending confidence; a box is dropped when its IoU
/// with an already kept box of the same class exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou_box(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Structural description of a decoder, used to audit head composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    NearestUpsample,
}

/// Bottom-up path aggregation over the pyramid.
#[derive(Debug, Clone)]
pub struct Pan {
    down_shallow: ConvBnAct,
    merge_mid: ConvBnAct,
    down_mid: ConvBnAct,
    merge_deep: ConvBnAct,
}

impl Pan {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, channels: [usize; 3], rng: &mut R) -> Self {
        let [n3, n4, n5] = channels;
        Self {
            down_shallow: ConvBnAct::new(store, "pan.down3", n3, n3, 3, 2, 1, rng),
            merge_mid: ConvBnAct::new(store, "pan.merge4", n3 + n4, n4, 3, 1, 1, rng),
            down_mid: ConvBnAct::new(store, "pan.down4", n4, n4, 3, 2, 1, rng),
            merge_deep: ConvBnAct::new(store, "pan.merge5", n4 + n5, n5, 3, 1, 1, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &PyramidFeatures) -> Result<PyramidFeatures> {
        check_strides(g, &p.levels)?;
        let [p3, p4, p5] = p.levels;
        let d = self.down_shallow.forward(g, p3.var);
        let cat = g.concat(&[d, p4.var]);
        let n4 = self.merge_mid.forward(g, cat);
        let d = self.down_mid.forward(g, n4);
        let cat = g.concat(&[d, p5.var]);
        let n5 = self.merge_deep.forward(g, cat);
        Ok(PyramidFeatures {
            levels: [p3, FeatureMap::new(n4, p4.stride), FeatureMap::new(n5, p5.stride)],
            pre_fpn_tap: p.pre_fpn_tap,
        })
    }
}

/// 1×1 prediction convolutions, one per scale.
#[derive(Debug, Clone)]
pub struct DetectHead {
    pub convs: Vec<Conv2d>,
    pub num_classes: usize,
}

impl DetectHead {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        channels: [usize; 3],
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let no = 5 + cfg.num_classes;
        let (w, h) = cfg.input_size;
        let convs = channels
            .iter()
            .zip(STRIDES)
            .enumerate()
            .map(|(i, (&c, stride))| {
                let conv = Conv2d::new(store, &format!("detect{i}"), c, ANCHORS_PER_SCALE * no, 1, 1, 1, true, rng);
                // Objectness prior of ~8 objects per image; class prior 0.6.
                let cells = (w / stride * h / stride) as f64;
                let obj_prior = (8.0 / cells).ln();
                let cls_prior = (0.6 / (cfg.num_classes as f64 - 0.99)).ln();
                let b = store.get_mut(conv.bias.expect("detect bias")).data_mut();
                for a in 0..ANCHORS_PER_SCALE {
                    b[a * no + 4] += T::from_f64_lossy(obj_prior);
                    for k in 5..no {
                        b[a * no + k] += T::from_f64_lossy(cls_prior);
                    }
                }
                conv
            })
            .collect();
        Self {
            convs,
            num_classes: cfg.num_classes,
        }
    }

    /// Raw prediction maps `(b, 3·(5+nc), h, w)` per scale.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &PyramidFeatures) -> [Var; 3] {
        [
            self.convs[0].forward(g, p.levels[0].var),
            self.convs[1].forward(g, p.levels[1].var),
            self.convs[2].forward(g, p.levels[2].var),
        ]
    }
}

/// Drivable-area decoder fed by the pre-pyramid stride-8 tap.
///
/// The tap is first projected down to stride 16, then four rounds of
/// (conv, ×2 nearest upsample) bring it to full resolution.
#[derive(Debug, Clone)]
pub struct DrivableHead {
    pub down: ConvBnAct,
    pub blocks: Vec<ConvBnAct>,
    pub out: Conv2d,
}

pub const DRIVABLE_UPSAMPLINGS: usize = 4;

impl DrivableHead {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, tap_channels: usize, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..=DRIVABLE_UPSAMPLINGS)
            .map(|i| (tap_channels >> (i + 1)).max(8))
            .collect();
        let down = ConvBnAct::new(store, "drivable.down", tap_channels, widths[0], 3, 2, 1, rng);
        let blocks = (0..DRIVABLE_UPSAMPLINGS)
            .map(|i| ConvBnAct::new(store, &format!("drivable.block{i}"), widths[i], widths[i + 1], 3, 1, 1, rng))
            .collect();
        let out = Conv2d::new(store, "drivable.out", widths[DRIVABLE_UPSAMPLINGS], 2, 3, 1, 1, true, rng);
        Self { down, blocks, out }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, tap: FeatureMap) -> Result<Var> {
        if tap.stride != 8 {
            return Err(Error::Structure(format!(
                "drivable head expects a stride-8 tap, got stride {}",
                tap.stride
            )));
        }
        let mut x = self.down.forward(g, tap.var);
        for block in &self.blocks {
            x = block.forward(g, x);
            x = g.upsample_nearest(x, 2);
        }
        Ok(self.out.forward(g, x))
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        let mut l = vec![LayerKind::Conv];
        for _ in &self.blocks {
            l.push(LayerKind::Conv);
            l.push(LayerKind::NearestUpsample);
        }
        l.push(LayerKind::Conv);
        l
    }
}

/// Lane decoder fed by the final (stride-8) pyramid output.
#[derive(Debug, Clone)]
pub struct LaneHead {
    pub kind: LaneDecoderKind,
    pub ups: Vec<Option<ConvTranspose2d>>,
    pub blocks: Vec<ConvBnAct>,
    pub out: Conv2d,
    pub in_stride: usize,
}

impl LaneHead {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        in_stride: usize,
        kind: LaneDecoderKind,
        rng: &mut R,
    ) -> Self {
        let steps = in_stride.trailing_zeros() as usize;
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        let mut prev = in_channels;
        for i in 0..steps {
            let width = (in_channels >> (i + 1)).max(8);
            match kind {
                LaneDecoderKind::TransposedConv => {
                    ups.push(Some(ConvTranspose2d::new(store, &format!("lane.up{i}"), prev, width, 2, rng)));
                    blocks.push(ConvBnAct::new(store, &format!("lane.block{i}"), width, width, 3, 1, 1, rng));
                }
                LaneDecoderKind::NearestUpsample => {
                    ups.push(None);
                    blocks.push(ConvBnAct::new(store, &format!("lane.block{i}"), prev, width, 3, 1, 1, rng));
                }
            }
            prev = width;
        }
        let out = Conv2d::new(store, "lane.out", prev, 2, 3, 1, 1, true, rng);
        Self {
            kind,
            ups,
            blocks,
            out,
            in_stride,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, deep: FeatureMap) -> Result<Var> {
        if deep.stride != self.in_stride {
            return Err(Error::Structure(format!(
                "lane head built for stride {}, got {}",
                self.in_stride, deep.stride
            )));
        }
        let mut x = deep.var;
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            x = match up {
                Some(deconv) => deconv.forward(g, x),
                None => g.upsample_nearest(x, 2),
            };
            x = block.forward(g, x);
        }
        Ok(self.out.forward(g, x))
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        let mut l = Vec::new();
        for up in &self.ups {
            l.push(if up.is_some() {
                LayerKind::TransposedConv
            } else {
                LayerKind::NearestUpsample
            });
            l.push(LayerKind::Conv);
        }
        l.push(LayerKind::Conv);
        l
    }
}
