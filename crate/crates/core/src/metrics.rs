//! Detection AP@0.5 / recall, segmentation mIoU and lane metrics.
//!
//! Evaluation state is kept per image so partial results from disjoint image
//! subsets can be merged and reduce to exactly the single-pass numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::heads::{BoxXyxy, Detection};

pub const AP_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two corner-form boxes; 0 for degenerate input.
pub fn iou_box(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let area = |r: &BoxXyxy| (r[2] - r[0]) * (r[3] - r[1]);
    if !(a[2] > a[0] && a[3] > a[1] && b[2] > b[0] && b[3] > b[1]) {
        log::warn!("degenerate box in IoU: {a:?} vs {b:?}");
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap50: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over classes with ground truth; `None` without any ground truth.
    pub map50: Option<f64>,
    pub recall: Option<f64>,
    pub per_class: Vec<ClassAp>,
    /// Classes that were detected but have no ground truth.
    pub excluded_classes: Vec<usize>,
}

/// VOC-style all-points AP at IoU 0.5 plus recall at `conf_threshold`.
///
/// Detections of all images are ranked by confidence; each one claims the
/// highest-IoU still-unmatched ground truth of its class in its image, and
/// is a true positive when that IoU is at least 0.5.
pub fn average_precision_50(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], conf_threshold: f64) -> ApSummary {
    assert_eq!(dets.len(), gts.len(), "one detection list per ground-truth list");
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *classes.entry(g.class_id).or_default() += 1;
    }
    let mut excluded: Vec<usize> = dets
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .filter(|c| !classes.contains_key(c))
        .collect();
    excluded.sort_unstable();
    excluded.dedup();

    let mut per_class = Vec::new();
    for (&class_id, &num_gt) in &classes {
        let (ap50, recall) = class_ap(dets, gts, class_id, num_gt, conf_threshold);
        per_class.push(ClassAp {
            class_id,
            num_gt,
            ap50,
            recall,
        });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        (!per_class.is_empty()).then(|| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64)
    };
    ApSummary {
        map50: mean(|c| c.ap50),
        recall: mean(|c| c.recall),
        per_class,
        excluded_classes: excluded,
    }
}

fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class_id: usize,
    num_gt: usize,
    conf_threshold: f64,
) -> (f64, f64) {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    // Ties are broken by content so the ranking does not depend on input order.
    ranked.sort_by(|a, b| {
        b.1.confidence
            .total_cmp(&a.1.confidence)
            .then(a.0.cmp(&b.0))
            .then_with(|| {
                a.1.bbox
                    .iter()
                    .zip(&b.1.bbox)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut recall_at_threshold = 0usize;
    // (true positives so far, detections so far) at each rank
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, (img, d)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class_id || matched[*img][j] {
                continue;
            }
            let iou = iou_box(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= AP_IOU_THRESHOLD {
                matched[*img][j] = true;
                tp += 1;
            }
        }
        if d.confidence >= conf_threshold {
            recall_at_threshold = tp;
        }
        curve.push((tp, rank + 1));
    }
    (all_points_ap(&curve, num_gt), recall_at_threshold as f64 / num_gt as f64)
}

/// Area under the monotone precision envelope, given cumulative
/// (true positives, detections) along the ranking.
fn all_points_ap(curve: &[(usize, usize)], num_gt: usize) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for (i, &(tp, n)) in curve.iter().enumerate().rev() {
        best = best.max(tp as f64 / n as f64);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (i, &(tp, _)) in curve.iter().enumerate() {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / num_gt as f64 * envelope[i];
            prev_tp = tp;
        }
    }
    ap
}

/// Binary confusion counts with foreground as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn foreground_iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }

    pub fn background_iou(&self) -> Option<f64> {
        let union = self.tn + self.fn_ + self.fp;
        (union > 0).then(|| self.tn as f64 / union as f64)
    }

    /// Mean over background and foreground of the classes present in
    /// either prediction or ground truth.
    pub fn mean_iou(&self) -> Option<f64> {
        let ious: Vec<f64> = [self.background_iou(), self.foreground_iou()].into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Fraction of ground-truth foreground pixels that are predicted.
    pub fn foreground_recall(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }
}

/// Split-level mIoU over {background, foreground}.
pub fn mean_iou_seg(pred: &[Mask], gt: &[Mask]) -> Result<Option<f64>> {
    Ok(accumulate(pred, gt)?.mean_iou())
}

/// Lane (accuracy, IoU) over a split. Accuracy is the fraction of
/// ground-truth lane pixels predicted; both are `None` when the split has no
/// lane pixels.
pub fn lane_metrics(pred: &[Mask], gt: &[Mask]) -> Result<(Option<f64>, Option<f64>)> {
    let c = accumulate(pred, gt)?;
    if c.tp + c.fn_ == 0 {
        return Ok((None, None));
    }
    Ok((c.foreground_recall(), c.foreground_iou()))
}

fn accumulate(pred: &[Mask], gt: &[Mask]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", pred.len(), gt.len())));
    }
    let mut total = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        total.add(&Confusion::from_masks(p, g)?);
    }
    Ok(total)
}

/// Everything needed to score one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageRecord {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GtBox>,
    pub drivable: Confusion,
    pub lane: Confusion,
}

impl ImageRecord {
    pub fn new(
        detections: Vec<Detection>,
        ground_truth: Vec<GtBox>,
        drivable: (&Mask, &Mask),
        lane: (&Mask, &Mask),
    ) -> Result<Self> {
        Ok(Self {
            detections,
            ground_truth,
            drivable: Confusion::from_masks(drivable.0, drivable.1)?,
            lane: Confusion::from_masks(lane.0, lane.1)?,
        })
    }
}

/// Mergeable evaluation state keyed by image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalState {
    pub images: BTreeMap<String, ImageRecord>,
}

impl EvalState {
    pub fn insert(&mut self, id: impl Into<String>, record: ImageRecord) -> Result<()> {
        let id = id.into();
        if self.images.contains_key(&id) {
            return Err(Error::Input(format!("image id {id} evaluated twice")));
        }
        self.images.insert(id, record);
        Ok(())
    }

    pub fn merge(mut self, other: EvalState) -> Result<Self> {
        for (id, rec) in other.images {
            self.insert(id, rec)?;
        }
        Ok(self)
    }

    pub fn report(&self, conf_threshold: f64) -> MetricReport {
        let dets: Vec<Vec<Detection>> = self.images.values().map(|r| r.detections.clone()).collect();
        let gts: Vec<Vec<GtBox>> = self.images.values().map(|r| r.ground_truth.clone()).collect();
        let ap = average_precision_50(&dets, &gts, conf_threshold);
        let mut drivable = Confusion::default();
        let mut lane = Confusion::default();
        let mut per_image = Vec::with_capacity(self.images.len());
        for (id, r) in &self.images {
            drivable.add(&r.drivable);
            lane.add(&r.lane);
            per_image.push(ImageSummary {
                id: id.clone(),
                num_detections: r.detections.len(),
                num_ground_truth: r.ground_truth.len(),
                drivable_miou: r.drivable.mean_iou(),
                lane_iou: r.lane.foreground_iou(),
            });
        }
        let lane_defined = lane.tp + lane.fn_ > 0;
        let mut notes = Vec::new();
        if ap.map50.is_none() {
            notes.push("no detection ground truth: mAP50 and recall undefined".to_string());
        }
        for c in &ap.excluded_classes {
            notes.push(format!("class {c} has detections but no ground truth; excluded from mAP"));
        }
        if !lane_defined {
            notes.push("no lane ground-truth pixels: lane metrics undefined".to_string());
        }
        MetricReport {
            num_images: self.images.len(),
            map50: ap.map50,
            recall: ap.recall,
            drivable_miou: drivable.mean_iou(),
            lane_accuracy: if lane_defined { lane.foreground_recall() } else { None },
            lane_iou: if lane_defined { lane.foreground_iou() } else { None },
            fps: None,
            param_count: None,
            per_class: ap.per_class,
            per_image,
            notes,
        }
    }
}

/// Merge partial states from disjoint image subsets into one report.
pub fn merge_reports(parts: Vec<EvalState>, conf_threshold: f64) -> Result<MetricReport> {
    let mut total = EvalState::default();
    for p in parts {
        total = total.merge(p)?;
    }
    Ok(total.report(conf_threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub drivable_miou: Option<f64>,
    pub lane_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_images: usize,
    pub map50: Option<f64>,
    pub recall: Option<f64>,
    pub drivable_miou: Option<f64>,
    pub lane_accuracy: Option<f64>,
    pub lane_iou: Option<f64>,
    pub fps: Option<f64>,
    pub param_count: Option<usize>,
    pub per_class: Vec<ClassAp>,
    pub per_image: Vec<ImageSummary>,
    pub notes: Vec<String>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table with percentages for the rate columns.
    pub fn to_table(&self) -> String {
        let header = [
            "Images",
            "mAP50",
            "Recall",
            "Drivable mIoU",
            "Accuracy",
            "Lane IoU",
            "Speed(fps)",
            "Params",
        ];
        let row = [
            self.num_images.to_string(),
            cell(self.map50),
            cell(self.recall),
            cell(self.drivable_miou),
            cell(self.lane_accuracy),
            cell(self.lane_iou),
            self.fps.map_or_else(|| "-".into(), |f| format!("{f:.1}")),
            self.param_count.map_or_else(|| "-".into(), |p| p.to_string()),
        ];
        let mut out = String::new();
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        for (i, h) in header.iter().enumerate() {
            let _ = write!(out, "{}{:>w$}", if i > 0 { " | " } else { "" }, h, w = widths[i]);
        }
        out.push('\n');
        for (i, w) in widths.iter().enumerate() {
            let _ = write!(out, "{}{}", if i > 0 { "-+-" } else { "" }, "-".repeat(*w));
        }
        out.push('\n');
        for (i, r) in row.iter().enumerate() {
            let _ = write!(out, "{}{:>w$}", if i > 0 { " | " } else { "" }, r, w = widths[i]);
        }
        out.push('\n');
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(confidence: f64, bbox: BoxXyxy) -> Detection {
        Detection {
            class_id: 0,
            confidence,
            bbox,
        }
    }

    fn gt(bbox: BoxXyxy) -> GtBox {
        GtBox { class_id: 0, bbox }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou_box(&a, &a), 1.0);
        assert_eq!(iou_box(&a, &[20.0, 20.0, 30.0, 30.0]), 0.0);
        assert!((iou_box(&a, &[5.0, 0.0, 15.0, 10.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_box(&a, &[3.0, 3.0, 3.0, 9.0]), 0.0);
    }

    #[test]
    fn iou_matches_pixel_counting() {
        let boxes = [
            [0.0, 0.0, 10.0, 10.0],
            [5.0, 0.0, 15.0, 10.0],
            [2.0, 3.0, 9.0, 17.0],
            [7.0, 7.0, 8.0, 8.0],
        ];
        let inside = |b: &BoxXyxy, x: usize, y: usize| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            px > b[0] && px < b[2] && py > b[1] && py < b[3]
        };
        for a in &boxes {
            for b in &boxes {
                let (mut i, mut u) = (0usize, 0usize);
                for y in 0..20 {
                    for x in 0..20 {
                        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                        i += (ia && ib) as usize;
                        u += (ia || ib) as usize;
                    }
                }
                assert!((iou_box(a, b) - i as f64 / u as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ap_single_match_and_miss() {
        // IoU 0.6: [0,0,10,10] vs [0,0,10,6] -> 60/100
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0])]];
        let hit = average_precision_50(&[vec![det(0.9, [0.0, 0.0, 10.0, 6.0])]], &g, 0.001);
        assert_eq!((hit.map50, hit.recall), (Some(1.0), Some(1.0)));
        let miss = average_precision_50(&[vec![det(0.9, [0.0, 0.0, 10.0, 4.0])]], &g, 0.001);
        assert_eq!((miss.map50, miss.recall), (Some(0.0), Some(0.0)));
        let none = average_precision_50(&[vec![]], &g, 0.001);
        assert_eq!((none.map50, none.recall), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn ap_excludes_classes_without_ground_truth() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0])]];
        let d = vec![vec![
            det(0.9, [0.0, 0.0, 10.0, 10.0]),
            Detection {
                class_id: 3,
                confidence: 0.8,
                bbox: [0.0, 0.0, 1.0, 1.0],
            },
        ]];
        let s = average_precision_50(&d, &g, 0.001);
        assert_eq!(s.map50, Some(1.0));
        assert_eq!(s.excluded_classes, vec![3]);
        assert_eq!(average_precision_50(&d, &[vec![]], 0.001).map50, None);
    }

    #[test]
    fn recall_respects_threshold() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0]), gt([20.0, 0.0, 30.0, 10.0])]];
        let d = vec![vec![det(0.9, [0.0, 0.0, 10.0, 10.0]), det(0.2, [20.0, 0.0, 30.0, 10.0])]];
        assert_eq!(average_precision_50(&d, &g, 0.5).recall, Some(0.5));
        assert_eq!(average_precision_50(&d, &g, 0.1).recall, Some(1.0));
    }

    fn mask(w: usize, h: usize, on: &[usize]) -> Mask {
        let mut m = Mask::new(w, h);
        for &i in on {
            m.data[i] = 1;
        }
        m
    }

    #[test]
    fn miou_examples() {
        let gt_m = mask(2, 2, &[0, 1]);
        let pred = mask(2, 2, &[]);
        let v = mean_iou_seg(&[pred.clone()], &[gt_m.clone()]).unwrap().unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(mean_iou_seg(&[gt_m.clone()], &[gt_m.clone()]).unwrap(), Some(1.0));
        assert!(mean_iou_seg(&[mask(3, 2, &[])], &[gt_m.clone()]).is_err());
        // label swap symmetry
        let inv = |m: &Mask| Mask {
            width: m.width,
            height: m.height,
            data: m.data.iter().map(|&v| 1 - v).collect(),
        };
        let p2 = mask(2, 2, &[1, 3]);
        assert_eq!(
            mean_iou_seg(&[p2.clone()], &[gt_m.clone()]).unwrap(),
            mean_iou_seg(&[inv(&p2)], &[inv(&gt_m)]).unwrap()
        );
    }

    #[test]
    fn lane_examples() {
        let g = mask(4, 1, &[1]);
        assert_eq!(lane_metrics(&[g.clone()], &[g.clone()]).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(lane_metrics(&[mask(4, 1, &[])], &[g.clone()]).unwrap(), (Some(0.0), Some(0.0)));
        let wide = mask(4, 1, &[0, 1, 2]);
        let (acc, iou) = lane_metrics(&[wide], &[g]).unwrap();
        assert_eq!(acc, Some(1.0));
        assert!((iou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lane_metrics(&[mask(4, 1, &[2])], &[mask(4, 1, &[])]).unwrap(), (None, None));
    }

    #[test]
    fn merge_rejects_overlap_and_handles_empty() {
        let mut a = EvalState::default();
        a.insert("x", ImageRecord::default()).unwrap();
        let b = a.clone();
        assert!(a.clone().merge(b).is_err());
        let r = merge_reports(vec![], 0.001).unwrap();
        assert_eq!(r.num_images, 0);
        assert_eq!(r.map50, None);
        assert_eq!(merge_reports(vec![a.clone()], 0.001).unwrap(), a.report(0.001));
    }

    #[test]
    fn table_has_all_columns() {
        let r = MetricReport {
            map50: Some(0.5),
            ..Default::default()
        };
        let t = r.to_table();
        for col in ["mAP50", "Recall", "Drivable mIoU", "Accuracy", "Lane IoU", "Speed(fps)", "Params"] {
            assert!(t.contains(col), "{t}");
        }
        assert!(t.contains("50.0"));
    }
}
