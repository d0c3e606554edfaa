//! Training losses and detection target assignment.
//!
//! Losses are evaluated in `f64` outside the autograd tape. Each returns its
//! value together with the gradient with respect to the head outputs, which
//! the trainer feeds back into the graph as backward seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{LaneLossKind, ANCHORS_PER_SCALE, STRIDES};
use crate::data::ObjectLabel;
use crate::error::{Error, Result};
use crate::heads::{cxcywh_to_xyxy, xyxy_to_cxcywh, AnchorSet, BoxXyxy, RawDetectionOutput};
use crate::tensor::Tensor;

mod ad;

use ad::{Dual, Scalar};

/// Largest anchor/box side ratio an anchor may be matched across.
pub const ANCHOR_RATIO_GATE: f64 = 4.0;
/// Probability clamp used when losses are evaluated on probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_class: f64,
    pub alpha_obj: f64,
    pub alpha_box: f64,
    /// Weight of the focal term against the dice term.
    pub gamma_tradeoff: f64,
    /// Tversky weight on false negatives.
    pub tversky_alpha: f64,
    /// Tversky weight on false positives.
    pub tversky_beta: f64,
    /// Focusing exponent; 2 gives the `(1 − p)²` modulation.
    pub focal_gamma: f64,
    pub seg_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_class: 0.5,
            alpha_obj: 1.0,
            alpha_box: 0.05,
            gamma_tradeoff: 1.0,
            tversky_alpha: 0.5,
            tversky_beta: 0.5,
            focal_gamma: 2.0,
            seg_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_class", self.alpha_class),
            ("alpha_obj", self.alpha_obj),
            ("alpha_box", self.alpha_box),
            ("gamma_tradeoff", self.gamma_tradeoff),
            ("tversky_alpha", self.tversky_alpha),
            ("tversky_beta", self.tversky_beta),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.seg_eps.is_finite() && self.seg_eps > 0.0) {
            return Err(Error::Config("seg_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-component losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub obj_loss: f64,
    pub box_loss: f64,
    pub drivable_loss: f64,
    pub lane_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(class: f64, obj: f64, box_: f64, drivable: f64, lane: f64, w: &LossWeights) -> Self {
        Self {
            class_loss: class,
            obj_loss: obj,
            box_loss: box_,
            drivable_loss: drivable,
            lane_loss: lane,
            total: w.alpha_class * class + w.alpha_obj * obj + w.alpha_box * box_ + drivable + lane,
        }
    }

    /// The first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("class", self.class_loss),
            ("objectness", self.obj_loss),
            ("box", self.box_loss),
            ("drivable", self.drivable_loss),
            ("lane", self.lane_loss),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    if x.v() > 0.0 {
        x + (S::c(1.0) + (-x).exp()).ln()
    } else {
        (S::c(1.0) + x.exp()).ln()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x.v() >= 0.0 {
        S::c(1.0) / (S::c(1.0) + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::c(1.0) + e)
    }
}

/// Focal binary cross-entropy of one logit against a (possibly soft) target:
/// `−[t(1−p)^γ ln p + (1−t) p^γ ln(1−p)]` with `p = σ(x)`.
fn focal_logit<S: Scalar>(x: S, t: f64, gamma: f64) -> S {
    let sp_pos = softplus(x); // −ln(1−p)
    let sp_neg = softplus(-x); // −ln p
    let one_minus_p_g = (sp_pos * S::c(-gamma)).exp();
    let p_g = (sp_neg * S::c(-gamma)).exp();
    S::c(t) * one_minus_p_g * sp_neg + S::c(1.0 - t) * p_g * sp_pos
}

fn focal_logit_grad(x: f64, t: f64, gamma: f64) -> (f64, f64) {
    let r = focal_logit(Dual::<1>::var(x, 0), t, gamma);
    (r.v, r.d[0])
}

/// Mean focal binary cross-entropy over probabilities, clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`. With `gamma = 0` this is plain BCE.
pub fn focal_bce(probs: &[f64], targets: &[f64], gamma: f64) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} targets", probs.len(), targets.len())));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * (1.0 - p).powf(gamma) * p.ln() + (1.0 - t) * p.powf(gamma) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean focal BCE over logits and its gradient.
pub fn focal_bce_logits(logits: &[f64], targets: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let (v, d) = focal_logit_grad(x, t, gamma);
            total += v;
            d / n
        })
        .collect();
    Ok((total / n, grad))
}

fn min_s<S: Scalar>(a: S, b: S) -> S {
    if a.v() <= b.v() {
        a
    } else {
        b
    }
}

fn max_s<S: Scalar>(a: S, b: S) -> S {
    if a.v() >= b.v() {
        a
    } else {
        b
    }
}

const CIOU_EPS: f64 = 1e-9;

/// Complete IoU between a predicted and a target corner-form box.
fn ciou<S: Scalar>(p: [S; 4], g: BoxXyxy) -> S {
    let gc = g.map(S::c);
    let iw = max_s(min_s(p[2], gc[2]) - max_s(p[0], gc[0]), S::c(0.0));
    let ih = max_s(min_s(p[3], gc[3]) - max_s(p[1], gc[1]), S::c(0.0));
    let inter = iw * ih;
    let (w1, h1) = (p[2] - p[0], p[3] - p[1]);
    let (w2, h2) = (g[2] - g[0], g[3] - g[1]);
    let union = w1 * h1 + S::c(w2 * h2) - inter + S::c(CIOU_EPS);
    let iou = inter / union;
    let cw = max_s(p[2], gc[2]) - min_s(p[0], gc[0]);
    let ch = max_s(p[3], gc[3]) - min_s(p[1], gc[1]);
    let c2 = cw * cw + ch * ch + S::c(CIOU_EPS);
    let dx = p[0] + p[2] - S::c(g[0] + g[2]);
    let dy = p[1] + p[3] - S::c(g[1] + g[3]);
    let rho2 = (dx * dx + dy * dy) * S::c(0.25);
    let da = S::c((w2 / (h2 + CIOU_EPS)).atan()) - (w1 / (h1 + S::c(CIOU_EPS))).atan();
    let v = da * da * S::c(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let alpha = v / (v - iou + S::c(1.0 + CIOU_EPS));
    iou - (rho2 / c2 + v * alpha)
}

/// Mean `1 − CIoU` over matched pairs; 0 for no pairs.
pub fn box_loss(pred: &[BoxXyxy], gt: &[BoxXyxy]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} target boxes", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| 1.0 - ciou(*p, *g)).sum();
    Ok(s / pred.len() as f64)
}

/// [`box_loss`] and its gradient with respect to the predicted corners.
pub fn box_loss_grad(pred: &[BoxXyxy], gt: &[BoxXyxy]) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} target boxes", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let pv = [0, 1, 2, 3].map(|i| Dual::<4>::var(p[i], i));
            let l = Dual::c(1.0) - ciou(pv, *g);
            total += l.v;
            l.d.map(|d| d / n)
        })
        .collect();
    Ok((total / n, grad))
}

/// Predicted corner box decoded from raw offsets, generic for differentiation.
fn decode_xyxy<S: Scalar>(t: [S; 4], cell: (usize, usize), stride: usize, anchor: [f64; 2]) -> [S; 4] {
    let s = stride as f64;
    let two = S::c(2.0);
    let cx = (two * sigmoid(t[0]) + S::c(cell.0 as f64 - 0.5)) * S::c(s);
    let cy = (two * sigmoid(t[1]) + S::c(cell.1 as f64 - 0.5)) * S::c(s);
    let sw = two * sigmoid(t[2]);
    let sh = two * sigmoid(t[3]);
    let hw = sw * sw * S::c(anchor[0] / 2.0);
    let hh = sh * sh * S::c(anchor[1] / 2.0);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// Grid cell of one positive anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AssignKey {
    pub scale: usize,
    pub anchor: usize,
    pub batch: usize,
    pub gy: usize,
    pub gx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignTarget {
    /// Index of the ground truth within its image.
    pub gt_index: usize,
    pub class_id: usize,
    pub bbox: BoxXyxy,
    /// Mixup weight of the ground truth.
    pub weight: f64,
    /// Worst side ratio between box and anchor (lower is a better fit).
    pub ratio: f64,
}

/// Anchor/cell → ground-truth map for one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub targets: BTreeMap<AssignKey, AssignTarget>,
    /// `(gh, gw)` per scale.
    pub grids: [(usize, usize); 3],
    pub batch: usize,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Match ground-truth boxes (input-pixel coordinates) to anchors and cells.
///
/// An anchor takes a box when every side ratio between them is below
/// [`ANCHOR_RATIO_GATE`]. The box is then assigned at the cell containing
/// its centre and at the nearer horizontal and nearer vertical neighbour
/// cells. When two boxes land on the same anchor cell the better-fitting one
/// keeps it. Zero-area and unmatched boxes are skipped with a warning, and
/// boxes with zero mixup weight are ignored.
pub fn assign_targets(gt: &[Vec<ObjectLabel>], anchors: &AnchorSet, grids: [(usize, usize); 3]) -> Assignment {
    let mut out = Assignment {
        targets: BTreeMap::new(),
        grids,
        batch: gt.len(),
    };
    for (b, objects) in gt.iter().enumerate() {
        for (i, obj) in objects.iter().enumerate() {
            if obj.weight <= 0.0 {
                continue;
            }
            let [cx, cy, w, h] = xyxy_to_cxcywh(obj.bbox);
            if !(w > 0.0 && h > 0.0) {
                log::warn!("image {b}: skipping zero-area box {:?}", obj.bbox);
                continue;
            }
            let mut matched = false;
            for (s, &stride) in STRIDES.iter().enumerate() {
                let (gh, gw) = grids[s];
                let (fx, fy) = (cx / stride as f64, cy / stride as f64);
                let (gx, gy) = (fx.floor(), fy.floor());
                if gx < 0.0 || gy < 0.0 || gx >= gw as f64 || gy >= gh as f64 {
                    continue;
                }
                let (gx, gy) = (gx as usize, gy as usize);
                let nx = if fx - (gx as f64) < 0.5 { gx.checked_sub(1) } else { Some(gx + 1).filter(|&x| x < gw) };
                let ny = if fy - (gy as f64) < 0.5 { gy.checked_sub(1) } else { Some(gy + 1).filter(|&y| y < gh) };
                let mut cells = vec![(gx, gy)];
                cells.extend(nx.map(|x| (x, gy)));
                cells.extend(ny.map(|y| (gx, y)));
                for a in 0..ANCHORS_PER_SCALE {
                    let [aw, ah] = anchors.per_scale[s][a];
                    let ratio = (w / aw).max(aw / w).max(h / ah).max(ah / h);
                    if ratio >= ANCHOR_RATIO_GATE {
                        continue;
                    }
                    matched = true;
                    for &(x, y) in &cells {
                        let key = AssignKey {
                            scale: s,
                            anchor: a,
                            batch: b,
                            gy: y,
                            gx: x,
                        };
                        let target = AssignTarget {
                            gt_index: i,
                            class_id: obj.class_id,
                            bbox: obj.bbox,
                            weight: obj.weight,
                            ratio,
                        };
                        out.targets
                            .entry(key)
                            .and_modify(|t| {
                                if ratio < t.ratio {
                                    *t = target;
                                }
                            })
                            .or_insert(target);
                    }
                }
            }
            if !matched {
                log::warn!("image {b}: box {:?} matches no anchor within ratio {ANCHOR_RATIO_GATE}", obj.bbox);
            }
        }
    }
    out
}

/// Fixed per-step targets derived from an assignment and the current
/// predictions. Objectness labels are the detached IoU of each positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    /// `(b, A, gh, gw)` soft objectness labels per scale.
    pub obj: Vec<Tensor<f64>>,
    pub positives: Vec<(AssignKey, AssignTarget)>,
}

fn offset(raw: &RawDetectionOutput, k: &AssignKey) -> usize {
    let sh = raw.scales[k.scale].shape();
    let (gh, gw, no) = (sh[2], sh[3], sh[4]);
    (((k.batch * ANCHORS_PER_SCALE + k.anchor) * gh + k.gy) * gw + k.gx) * no
}

fn plain_iou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn build_targets(raw: &RawDetectionOutput, assignment: &Assignment, anchors: &AnchorSet) -> Result<DetectionTargets> {
    if raw.scales.len() != 3 {
        return Err(Error::Shape(format!("expected 3 detection scales, got {}", raw.scales.len())));
    }
    for (s, t) in raw.scales.iter().enumerate() {
        let sh = t.shape();
        if sh[0] != assignment.batch || (sh[2], sh[3]) != assignment.grids[s] {
            return Err(Error::Shape(format!(
                "scale {s}: predictions {:?} do not match assignment grid {:?} x batch {}",
                sh, assignment.grids[s], assignment.batch
            )));
        }
    }
    let mut obj: Vec<Tensor<f64>> = raw
        .scales
        .iter()
        .map(|t| Tensor::zeros(&t.shape()[..4]))
        .collect();
    let mut positives = Vec::with_capacity(assignment.len());
    for (k, t) in &assignment.targets {
        let off = offset(raw, k);
        let p = &raw.scales[k.scale].data()[off..off + 4];
        let pred = decode_xyxy([p[0], p[1], p[2], p[3]], (k.gx, k.gy), STRIDES[k.scale], anchors.per_scale[k.scale][k.anchor]);
        let label = (plain_iou(pred, t.bbox) * t.weight).clamp(0.0, 1.0);
        let (_, _, gh, gw) = {
            let s = obj[k.scale].shape();
            (s[0], s[1], s[2], s[3])
        };
        obj[k.scale].data_mut()[((k.batch * ANCHORS_PER_SCALE + k.anchor) * gh + k.gy) * gw + k.gx] = label;
        positives.push((*k, *t));
    }
    Ok(DetectionTargets { obj, positives })
}

/// Unweighted detection loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLoss {
    pub class: f64,
    pub obj: f64,
    pub box_: f64,
}

/// Detection losses for fixed targets and the gradient of
/// `α₁·class + α₂·obj + α₃·box` with respect to the raw outputs.
///
/// Each term is a per-scale mean summed over scales. Objectness averages the
/// focal BCE over every cell of a scale; class and box terms average over the
/// scale's positives, weighted by the mixup weight of their ground truth, and
/// are 0 for a scale without positives.
pub fn detection_loss(
    raw: &RawDetectionOutput,
    targets: &DetectionTargets,
    anchors: &AnchorSet,
    w: &LossWeights,
) -> Result<(DetectionLoss, RawDetectionOutput)> {
    let mut grad = raw.zeros_like();
    let nc = raw.num_classes;
    let no = 5 + nc;
    let gamma = w.focal_gamma;
    let mut loss = DetectionLoss::default();

    for (s, t) in raw.scales.iter().enumerate() {
        let labels = targets.obj[s].data();
        let cells = labels.len() as f64;
        let g = grad.scales[s].data_mut();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let (v, d) = focal_logit_grad(t.data()[i * no + 4], label, gamma);
            total += v;
            g[i * no + 4] = w.alpha_obj * d / cells;
        }
        loss.obj += total / cells;
    }

    let mut weight_sum = vec![0.0; raw.scales.len()];
    for (k, t) in &targets.positives {
        weight_sum[k.scale] += t.weight;
    }
    for (k, t) in &targets.positives {
        if weight_sum[k.scale] > 0.0 {
            let off = offset(raw, k);
            let p = &raw.scales[k.scale].data()[off..off + no];
            let g = &mut grad.scales[k.scale].data_mut()[off..off + no];
            let share = t.weight / weight_sum[k.scale];

            let tv = [0, 1, 2, 3].map(|i| Dual::<4>::var(p[i], i));
            let pred = decode_xyxy(tv, (k.gx, k.gy), STRIDES[k.scale], anchors.per_scale[k.scale][k.anchor]);
            let l = Dual::c(1.0) - ciou(pred, t.bbox);
            loss.box_ += share * l.v;
            for i in 0..4 {
                g[i] += w.alpha_box * share * l.d[i];
            }

            for c in 0..nc {
                let target = if c == t.class_id { 1.0 } else { 0.0 };
                let (v, d) = focal_logit_grad(p[5 + c], target, gamma);
                loss.class += share * v / nc as f64;
                g[5 + c] += w.alpha_class * share * d / nc as f64;
            }
        }
    }
    Ok((loss, grad))
}

fn check_seg(logits: &Tensor<f64>, gt: &[u8]) -> Result<(usize, usize)> {
    if logits.shape().len() != 4 || logits.shape()[1] != 2 {
        return Err(Error::Shape(format!("expected (b, 2, h, w) logits, got {:?}", logits.shape())));
    }
    let (b, _, h, w) = logits.dims4();
    if gt.len() != b * h * w {
        return Err(Error::Input(format!(
            "mask has {} pixels, logits cover {}",
            gt.len(),
            b * h * w
        )));
    }
    Ok((b, h * w))
}

/// Two-class softmax probabilities of `(b, 2, h, w)` logits.
pub fn softmax2(logits: &Tensor<f64>) -> Tensor<f64> {
    let (b, _, h, w) = logits.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for n in 0..b {
        let base = n * 2 * hw;
        for i in 0..hw {
            let (x0, x1) = (logits.data()[base + i], logits.data()[base + hw + i]);
            let p1 = crate::tensor::sigmoid(x1 - x0);
            out.data_mut()[base + i] = 1.0 - p1;
            out.data_mut()[base + hw + i] = p1;
        }
    }
    out
}

/// Mean per-pixel two-class cross-entropy and its gradient.
pub fn cross_entropy_seg(logits: &Tensor<f64>, gt: &[u8]) -> Result<(f64, Tensor<f64>)> {
    let (b, hw) = check_seg(logits, gt)?;
    let n = (b * hw) as f64;
    let probs = softmax2(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for bi in 0..b {
        let base = bi * 2 * hw;
        for i in 0..hw {
            let g = gt[bi * hw + i] != 0;
            let (x0, x1) = (logits.data()[base + i], logits.data()[base + hw + i]);
            // −ln softmax of the true class
            let margin = if g { x1 - x0 } else { x0 - x1 };
            total += crate::tensor::softplus(-margin);
            let p1 = probs.data()[base + hw + i];
            let t1 = if g { 1.0 } else { 0.0 };
            grad.data_mut()[base + hw + i] = (p1 - t1) / n;
            grad.data_mut()[base + i] = (t1 - p1) / n;
        }
    }
    Ok((total / n, grad))
}

/// Soft true-positive / false-negative / false-positive sums per class
/// (index 0 background, 1 foreground).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassCounts {
    pub tp: [f64; 2],
    pub fn_: [f64; 2],
    pub fp: [f64; 2],
}

fn check_probs(probs: &Tensor<f64>, gt: &[u8]) -> Result<(usize, usize)> {
    let (b, hw) = check_seg(probs, gt)?;
    for n in 0..b {
        let base = n * 2 * hw;
        for i in 0..hw {
            let (p0, p1) = (probs.data()[base + i], probs.data()[base + hw + i]);
            if !((p0 + p1 - 1.0).abs() <= 1e-5 && p0 >= 0.0 && p1 >= 0.0) {
                return Err(Error::Input(format!(
                    "probabilities at batch {n} pixel {i} are not normalized ({p0} + {p1})"
                )));
            }
        }
    }
    Ok((b, hw))
}

pub fn tversky_counts(probs: &Tensor<f64>, gt: &[u8]) -> Result<ClassCounts> {
    let (b, hw) = check_probs(probs, gt)?;
    let mut c = ClassCounts::default();
    for n in 0..b {
        for cls in 0..2 {
            let plane = &probs.data()[(n * 2 + cls) * hw..][..hw];
            for (i, &p) in plane.iter().enumerate() {
                let g = if (gt[n * hw + i] != 0) == (cls == 1) { 1.0 } else { 0.0 };
                c.tp[cls] += p * g;
                c.fn_[cls] += (1.0 - p) * g;
                c.fp[cls] += p * (1.0 - g);
            }
        }
    }
    Ok(c)
}

/// Dice (Tversky) plus focal loss on softmax probabilities, with counts
/// taken over the whole batch:
///
/// `L = C − Σ_c TP/(TP + α·FN + β·FP + ε) + (γ/N) Σ_c Σ_n g(1 − p)^k (−ln p)`
///
/// where `N` is the number of pixels and `k = focal_gamma`. Probabilities are
/// clamped to `[PROB_CLAMP, 1]` inside the logarithm. A class missing from
/// both ground truth and prediction contributes `0/ε = 0` to the dice sum.
pub fn hybrid_seg_loss(probs: &Tensor<f64>, gt: &[u8], w: &LossWeights) -> Result<f64> {
    let counts = tversky_counts(probs, gt)?;
    let (b, hw) = check_seg(probs, gt)?;
    let n = (b * hw) as f64;
    let mut focal = 0.0;
    for bi in 0..b {
        for cls in 0..2 {
            let plane = &probs.data()[(bi * 2 + cls) * hw..][..hw];
            for (i, &p) in plane.iter().enumerate() {
                if (gt[bi * hw + i] != 0) == (cls == 1) {
                    focal += (1.0 - p).powf(w.focal_gamma) * -(p.max(PROB_CLAMP)).ln();
                }
            }
        }
    }
    Ok(dice_part(&counts, w) + w.gamma_tradeoff * focal / n)
}

fn dice_part(c: &ClassCounts, w: &LossWeights) -> f64 {
    2.0 - (0..2)
        .map(|k| c.tp[k] / (c.tp[k] + w.tversky_alpha * c.fn_[k] + w.tversky_beta * c.fp[k] + w.seg_eps))
        .sum::<f64>()
}

/// Lane loss on logits with its gradient.
///
/// `FocalPlusDice` is [`hybrid_seg_loss`] on the softmax; `Focal` keeps only
/// the focal term, unscaled by the trade-off weight. The focal term uses the
/// log-softmax directly, so it needs no clamp.
pub fn lane_loss(logits: &Tensor<f64>, gt: &[u8], w: &LossWeights, kind: LaneLossKind) -> Result<(f64, Tensor<f64>)> {
    let (b, hw) = check_seg(logits, gt)?;
    let n = (b * hw) as f64;
    let probs = softmax2(logits);
    let (use_dice, focal_weight) = match kind {
        LaneLossKind::FocalPlusDice => (true, w.gamma_tradeoff),
        LaneLossKind::Focal => (false, 1.0),
    };
    // dL/dp for every (class, pixel), then through the softmax.
    let mut dp: Tensor<f64> = Tensor::zeros(logits.shape());
    let mut loss = 0.0;

    if use_dice {
        let c = tversky_counts(&probs, gt)?;
        loss += dice_part(&c, w);
        for k in 0..2 {
            let den = c.tp[k] + w.tversky_alpha * c.fn_[k] + w.tversky_beta * c.fp[k] + w.seg_eps;
            // d(TP/den)/dp_n for g = 1 and g = 0
            let d_pos = (den - c.tp[k] * (1.0 - w.tversky_alpha)) / (den * den);
            let d_neg = -(c.tp[k] * w.tversky_beta) / (den * den);
            for bi in 0..b {
                for i in 0..hw {
                    let g = (gt[bi * hw + i] != 0) == (k == 1);
                    dp.data_mut()[(bi * 2 + k) * hw + i] -= if g { d_pos } else { d_neg };
                }
            }
        }
    }

    let gamma = w.focal_gamma;
    let mut focal = 0.0;
    for bi in 0..b {
        let base = bi * 2 * hw;
        for i in 0..hw {
            let k = usize::from(gt[bi * hw + i] != 0);
            let (xk, xo) = (logits.data()[base + k * hw + i], logits.data()[base + (1 - k) * hw + i]);
            let p = probs.data()[base + k * hw + i];
            let nll = crate::tensor::softplus(xo - xk); // −ln p
            let q = 1.0 - p;
            focal += q.powf(gamma) * nll;
            // d/dp [(1−p)^γ (−ln p)]
            let d = -gamma * q.powf(gamma - 1.0) * nll - q.powf(gamma) / p.max(f64::MIN_POSITIVE);
            dp.data_mut()[base + k * hw + i] += focal_weight * d / n;
        }
    }
    loss += focal_weight * focal / n;

    let mut grad = Tensor::zeros(logits.shape());
    for bi in 0..b {
        let base = bi * 2 * hw;
        for i in 0..hw {
            let (p0, p1) = (probs.data()[base + i], probs.data()[base + hw + i]);
            let (g0, g1) = (dp.data()[base + i], dp.data()[base + hw + i]);
            let dot = p0 * g0 + p1 * g1;
            grad.data_mut()[base + i] = p0 * (g0 - dot);
            grad.data_mut()[base + hw + i] = p1 * (g1 - dot);
        }
    }
    Ok((loss, grad))
}

/// Targets for every head of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub objects: Vec<Vec<ObjectLabel>>,
    /// `b·h·w` drivable labels in {0, 1}.
    pub drivable: Vec<u8>,
    /// `b·h·w` lane labels in {0, 1}.
    pub lane: Vec<u8>,
}

/// Gradients of the joint loss with respect to each head output, in the
/// heads' native `(b, c, h, w)` layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub detection: [Tensor<f64>; 3],
    pub drivable: Tensor<f64>,
    pub lane: Tensor<f64>,
}

/// Head outputs in `f64` and native layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub detection: [Tensor<f64>; 3],
    pub drivable: Tensor<f64>,
    pub lane: Tensor<f64>,
}

/// The full training objective: weighted detection loss plus drivable
/// cross-entropy plus the lane loss.
pub fn joint_loss(
    out: &HeadOutputs,
    targets: &BatchTargets,
    anchors: &AnchorSet,
    num_classes: usize,
    w: &LossWeights,
    lane_kind: LaneLossKind,
) -> Result<(LossBreakdown, HeadGradients)> {
    let raw = RawDetectionOutput::from_head_outputs(&out.detection, num_classes);
    let grids = [0, 1, 2].map(|s| {
        let sh = raw.scales[s].shape();
        (sh[2], sh[3])
    });
    let assignment = assign_targets(&targets.objects, anchors, grids);
    let det_targets = build_targets(&raw, &assignment, anchors)?;
    let (det, det_grad) = detection_loss(&raw, &det_targets, anchors, w)?;
    let (drivable, drivable_grad) = cross_entropy_seg(&out.drivable, &targets.drivable)?;
    let (lane, lane_grad) = lane_loss(&out.lane, &targets.lane, w, lane_kind)?;
    let breakdown = LossBreakdown::new(det.class, det.obj, det.box_, drivable, lane, w);
    if let Some(component) = breakdown.non_finite() {
        return Err(Error::NonFiniteLoss { component });
    }
    let detection = [0, 1, 2].map(|s| crate::heads::from_detection_layout::<f64>(&det_grad.scales[s]));
    Ok((
        breakdown,
        HeadGradients {
            detection,
            drivable: drivable_grad,
            lane: lane_grad,
        },
    ))
}

/// Decode the corner box a raw offset vector represents (no clipping).
pub fn decode_raw_box(t: [f64; 4], cell: (usize, usize), stride: usize, anchor: [f64; 2]) -> BoxXyxy {
    cxcywh_to_xyxy(crate::heads::decode_cell(t, cell, stride, anchor))
}
