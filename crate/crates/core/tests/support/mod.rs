//! Independent oracles and whole-property checks shared by the test targets.
//! Every `check_*` function panics with a description on the first mismatch.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadsense::autograd::{Graph, OpKind};
use roadsense::config::{LaneDecoderKind, LaneLossKind, ModelConfig};
use roadsense::data::*;
use roadsense::heads::{to_detection_layout, Detection, LayerKind};
use roadsense::losses::*;
use roadsense::metrics::*;
use roadsense::tensor::Tensor;
use roadsense::training::{lr_at, TrainConfig};
use roadsense::PerceptionModel;

// ---------------------------------------------------------------- losses

const H: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-3;

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Asserts agreement and returns the largest relative error seen.
pub fn assert_grads(analytic: &[f64], numeric: &[f64], what: &str) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(err <= GRAD_REL_TOL * scale + 1e-9, "{what}: coordinate {i}: analytic {a} vs numeric {n}");
        if scale > 1e-6 {
            worst = worst.max(err / scale);
        }
    }
    worst
}

pub fn random_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

pub fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect()
}

pub fn check_focal_gradient(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = random_logits(&mut rng, &[1, 2, 4, 4]);
        let t: Vec<f64> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.0..1.0) }).collect();
        let (_, g) = focal_bce_logits(x.data(), &t, 2.0).unwrap();
        let num = numeric_grad(x.data(), |v| focal_bce_logits(v, &t, 2.0).unwrap().0);
        worst = worst.max(assert_grads(&g, &num, "focal"));
    }
    worst
}

pub fn check_box_gradient(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = |rng: &mut ChaCha8Rng| -> Vec<[f64; 4]> {
        (0..8)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
                [x, y, x + rng.gen_range(2.0..15.0), y + rng.gen_range(2.0..15.0)]
            })
            .collect()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let pred = boxes(&mut rng);
        let gt = boxes(&mut rng);
        let (v, g) = box_loss_grad(&pred, &gt).unwrap();
        assert!((v - box_loss(&pred, &gt).unwrap()).abs() < 1e-15);
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let num = numeric_grad(&flat, |v| {
            let p: Vec<[f64; 4]> = v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            box_loss(&p, &gt).unwrap()
        });
        let g: Vec<f64> = g.into_iter().flatten().collect();
        worst = worst.max(assert_grads(&g, &num, "ciou"));
    }
    worst
}

pub fn check_cross_entropy_gradient(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = random_logits(&mut rng, &[1, 2, 4, 4]);
        let gt = random_bits(&mut rng, 16);
        let (_, g) = cross_entropy_seg(&x, &gt).unwrap();
        let num = numeric_grad(x.data(), |v| {
            cross_entropy_seg(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &gt).unwrap().0
        });
        worst = worst.max(assert_grads(g.data(), &num, "cross-entropy"));
    }
    worst
}

/// Lane losses through the softmax; the hybrid variant must also equal the
/// hybrid loss evaluated on the probabilities.
pub fn check_lane_loss_gradient(seed: u64, cases: usize, kind: LaneLossKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = random_logits(&mut rng, &[1, 2, 4, 4]);
        let gt = random_bits(&mut rng, 16);
        let (v, g) = lane_loss(&x, &gt, &w, kind).unwrap();
        if kind == LaneLossKind::FocalPlusDice {
            let direct = hybrid_seg_loss(&softmax2(&x), &gt, &w).unwrap();
            assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
        }
        let num = numeric_grad(x.data(), |d| {
            lane_loss(&Tensor::from_vec(x.shape(), d.to_vec()).unwrap(), &gt, &w, kind).unwrap().0
        });
        worst = worst.max(assert_grads(g.data(), &num, "lane"));
    }
    worst
}

/// Per-pixel evaluation of the hybrid loss written out independently.
pub fn hybrid_oracle(p1: &[f64], gt: &[u8], w: &LossWeights) -> f64 {
    let n = p1.len();
    let mut dice = 0.0;
    for class in [0u8, 1] {
        let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = if class == 1 { p1[i] } else { 1.0 - p1[i] };
            if gt[i] == class {
                tp += p;
                fn_ += 1.0 - p;
            } else {
                fp += p;
            }
        }
        dice += tp / (tp + w.tversky_alpha * fn_ + w.tversky_beta * fp + w.seg_eps);
    }
    let mut focal = 0.0;
    for i in 0..n {
        let p_true = if gt[i] == 1 { p1[i] } else { 1.0 - p1[i] };
        focal += (1.0 - p_true).powi(2) * -p_true.max(PROB_CLAMP).ln();
    }
    2.0 - dice + w.gamma_tradeoff * focal / n as f64
}

pub fn probs_tensor(p1: &[f64], h: usize, w: usize) -> Tensor<f64> {
    let mut v: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
    v.extend_from_slice(p1);
    Tensor::from_vec(&[1, 2, h, w], v).unwrap()
}

/// Returns the largest absolute deviation from the oracle.
pub fn check_hybrid_oracle(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights {
        gamma_tradeoff: 0.7,
        tversky_alpha: 0.3,
        tversky_beta: 0.7,
        ..LossWeights::default()
    };
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let p1: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt = random_bits(&mut rng, 64);
        let got = hybrid_seg_loss(&probs_tensor(&p1, 8, 8), &gt, &w).unwrap();
        let err = (got - hybrid_oracle(&p1, &gt, &w)).abs();
        assert!(err < 1e-8, "case {case}: deviation {err}");
        worst = worst.max(err);
    }
    worst
}

/// Loss of a perfect one-hot prediction.
pub fn check_hybrid_one_hot() -> f64 {
    let gt: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
    let p1: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
    let v = hybrid_seg_loss(&probs_tensor(&p1, 8, 8), &gt, &LossWeights::default()).unwrap();
    assert!(v < 1e-4, "one-hot loss {v}");
    v
}

/// Returns the largest deviation in units of machine epsilon times the total.
pub fn check_breakdown_identity(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let w = LossWeights {
            alpha_class: rng.gen_range(0.0..3.0),
            alpha_obj: rng.gen_range(0.0..3.0),
            alpha_box: rng.gen_range(0.0..3.0),
            ..LossWeights::default()
        };
        let c: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..10.0));
        let b = LossBreakdown::new(c[0], c[1], c[2], c[3], c[4], &w);
        let expected = w.alpha_class * c[0] + w.alpha_obj * c[1] + w.alpha_box * c[2] + c[3] + c[4];
        let ulps = (b.total - expected).abs() / (f64::EPSILON * expected.abs());
        assert!(ulps <= 4.0, "{} vs {expected}", b.total);
        assert_eq!((b.class_loss, b.obj_loss, b.box_loss, b.drivable_loss, b.lane_loss), (c[0], c[1], c[2], c[3], c[4]));
        worst = worst.max(ulps);
    }
    worst
}

// ---------------------------------------------------------------- metrics

pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = ix * iy;
    i / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i)
}

/// True positives among the `k` highest-ranked detections of `class`,
/// matching from scratch.
fn tp_in_top_k(ranked: &[(usize, Detection)], gts: &[Vec<GtBox>], class: usize, k: usize) -> usize {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for (img, d) in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id == class && !used[*img][j] {
                let v = oracle_iou(d.bbox, g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, v)) = best {
            if v >= 0.5 {
                used[*img][j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Brute-force PR curve: precision and recall at every cut of the ranking,
/// then the area under the monotone envelope.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: usize, thr: f64) -> (f64, f64) {
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (i, d.clone())))
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());
    let n = ranked.len();
    let tps: Vec<usize> = (0..=n).map(|k| tp_in_top_k(&ranked, gts, class, k)).collect();
    let mut ap = 0.0;
    for k in 1..=n {
        if tps[k] > tps[k - 1] {
            let p_max = (k..=n).map(|j| tps[j] as f64 / j as f64).fold(0.0, f64::max);
            ap += (tps[k] - tps[k - 1]) as f64 / num_gt as f64 * p_max;
        }
    }
    let kept = ranked.iter().filter(|(_, d)| d.confidence >= thr).count();
    (ap, tps[kept] as f64 / num_gt as f64)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0));
    [x, y, x + rng.gen_range(5.0..30.0), y + rng.gen_range(5.0..30.0)]
}

/// Five ground-truth boxes over one to three images with jittered, missing,
/// misclassified and spurious detections.
pub fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let images = rng.gen_range(1..=3);
    let mut gts = vec![Vec::new(); images];
    let mut dets = vec![Vec::new(); images];
    for _ in 0..5 {
        let img = rng.gen_range(0..images);
        let g = GtBox {
            class_id: rng.gen_range(0..2),
            bbox: random_box(rng),
        };
        for _ in 0..rng.gen_range(0..=2) {
            let s = rng.gen_range(0.0..6.0);
            let b = g.bbox.map(|v| v + rng.gen_range(-s..s));
            let b = [b[0], b[1], b[2].max(b[0] + 1.0), b[3].max(b[1] + 1.0)];
            dets[img].push(Detection {
                class_id: if rng.gen_bool(0.9) { g.class_id } else { 1 - g.class_id },
                confidence: rng.gen_range(0.0..1.0),
                bbox: b,
            });
        }
        gts[img].push(g);
    }
    for _ in 0..rng.gen_range(0..4) {
        let img = rng.gen_range(0..images);
        dets[img].push(Detection {
            class_id: rng.gen_range(0..2),
            confidence: rng.gen_range(0.0..1.0),
            bbox: random_box(rng),
        });
    }
    (dets, gts)
}

pub fn check_ap_oracle(seed: u64, scenes: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for scene in 0..scenes {
        let (dets, gts) = random_scene(&mut rng);
        let thr = 0.3;
        let s = average_precision_50(&dets, &gts, thr);
        let classes: Vec<usize> = (0..2).filter(|c| gts.iter().flatten().any(|g| g.class_id == *c)).collect();
        assert_eq!(s.per_class.len(), classes.len());
        let (mut ap_sum, mut rec_sum) = (0.0, 0.0);
        for (pc, &c) in s.per_class.iter().zip(&classes) {
            let (ap, rec) = oracle_ap(&dets, &gts, c, thr);
            assert_eq!(pc.class_id, c);
            assert!((pc.ap50 - ap).abs() < 1e-12, "scene {scene} class {c}: {} vs {ap}", pc.ap50);
            assert_eq!(pc.recall, rec, "scene {scene} class {c}");
            ap_sum += ap;
            rec_sum += rec;
        }
        let n = classes.len() as f64;
        assert!((s.map50.unwrap() - ap_sum / n).abs() < 1e-12);
        assert!((s.recall.unwrap() - rec_sum / n).abs() < 1e-12);
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    let mut m = Mask::new(w, h);
    for v in &mut m.data {
        *v = u8::from(rng.gen_bool(p));
    }
    m
}

/// Per-pixel confusion counts by class: `[tp, fp, fn]` for classes 0 and 1.
pub fn oracle_counts(pred: &[Mask], gt: &[Mask]) -> [[u64; 3]; 2] {
    let mut c = [[0u64; 3]; 2];
    for (p, g) in pred.iter().zip(gt) {
        for y in 0..p.height {
            for x in 0..p.width {
                let (pv, gv) = (p.get(x, y) as usize, g.get(x, y) as usize);
                if pv == gv {
                    c[pv][0] += 1;
                } else {
                    c[pv][1] += 1;
                    c[gv][2] += 1;
                }
            }
        }
    }
    c
}

/// mIoU and lane metrics on 64x64 masks against the confusion oracle,
/// compared for exact equality.
pub fn check_seg_metrics_oracle(seed: u64, cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..4);
        let density = [0.0, 0.05, 0.5, 1.0][case % 4];
        let pred: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, 64, 64, density)).collect();
        let gt_density = rng.gen_range(0.0..0.6);
        let gt: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, 64, 64, gt_density)).collect();
        let c = oracle_counts(&pred, &gt);
        let ious: Vec<f64> = c
            .iter()
            .filter(|k| k[0] + k[1] + k[2] > 0)
            .map(|k| k[0] as f64 / (k[0] + k[1] + k[2]) as f64)
            .collect();
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(mean_iou_seg(&pred, &gt).unwrap(), Some(miou), "case {case}");

        let fg = c[1];
        let (acc, iou) = lane_metrics(&pred, &gt).unwrap();
        if fg[0] + fg[2] == 0 {
            assert_eq!((acc, iou), (None, None));
        } else {
            assert_eq!(acc, Some(fg[0] as f64 / (fg[0] + fg[2]) as f64), "case {case}");
            assert_eq!(iou, Some(fg[0] as f64 / (fg[0] + fg[1] + fg[2]) as f64), "case {case}");
        }
    }
}

// ---------------------------------------------------------------- model

fn count<K: PartialEq + Copy>(ops: &[K], k: K) -> usize {
    ops.iter().filter(|&&o| o == k).count()
}

/// Output shapes of the default network at 640x384.
pub fn check_output_contract() {
    let cfg = ModelConfig::default();
    let nc = cfg.num_classes;
    let m = PerceptionModel::<f32>::new(cfg, 1).unwrap();
    let out = m.infer(Tensor::full(&[1, 3, 384, 640], 0.5)).unwrap();
    let grids: Vec<(usize, usize)> = out.detection.iter().map(|d| (d.dims4().3, d.dims4().2)).collect();
    assert_eq!(grids, vec![(80, 48), (40, 24), (20, 12)]);
    for d in &out.detection {
        assert_eq!(d.dims4().1, 3 * (5 + nc));
        let l = to_detection_layout(d, nc);
        assert_eq!(l.shape()[1] * l.shape()[4], 3 * (5 + nc));
    }
    assert_eq!(out.drivable.shape(), &[1, 2, 384, 640]);
    assert_eq!(out.lane.shape(), &[1, 2, 384, 640]);
}

/// Operations recorded by each segmentation head during a forward pass.
pub fn check_head_composition() {
    for kind in [LaneDecoderKind::TransposedConv, LaneDecoderKind::NearestUpsample] {
        let cfg = ModelConfig {
            lane_decoder_kind: kind,
            ..ModelConfig::compact(64, 64)
        };
        let m = PerceptionModel::<f32>::new(cfg, 0).unwrap();
        let mut g = Graph::new(&m.store, false);
        let x = g.constant(Tensor::full(&[1, 3, 64, 64], 0.5));
        let pyramid = m.encoder.forward(&mut g, x).unwrap();

        let before = g.op_kinds().len();
        m.drivable.forward(&mut g, pyramid.pre_fpn_tap).unwrap();
        let drivable_ops = g.op_kinds()[before..].to_vec();
        assert_eq!(count(&drivable_ops, OpKind::UpsampleNearest), 4);
        assert_eq!(count(&drivable_ops, OpKind::ConvTranspose), 0);

        let before = g.op_kinds().len();
        m.lane.forward(&mut g, pyramid.levels[0]).unwrap();
        let lane_ops = g.op_kinds()[before..].to_vec();
        let (up, deconv) = (count(&lane_ops, OpKind::UpsampleNearest), count(&lane_ops, OpKind::ConvTranspose));
        match kind {
            LaneDecoderKind::TransposedConv => {
                assert_eq!((up, deconv), (0, 3));
                assert!(!m.lane.layers().contains(&LayerKind::NearestUpsample));
            }
            LaneDecoderKind::NearestUpsample => assert_eq!((up, deconv), (3, 0)),
        }
        assert_eq!(count(&m.drivable.layers(), LayerKind::NearestUpsample), 4);
    }
}

// ---------------------------------------------------------------- data

/// Squared distance from `p` to segment `ab`, by cases on the projection.
fn oracle_seg_dist_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d2 = |u: [f64; 2], v: [f64; 2]| (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2);
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let bp = [p[0] - b[0], p[1] - b[1]];
    if ap[0] * ab[0] + ap[1] * ab[1] <= 0.0 {
        return d2(p, a);
    }
    if bp[0] * ab[0] + bp[1] * ab[1] >= 0.0 {
        return d2(p, b);
    }
    let cross = ap[0] * ab[1] - ap[1] * ab[0];
    cross * cross / (ab[0] * ab[0] + ab[1] * ab[1])
}

pub fn oracle_raster(line: &[[f64; 2]], width: u32, size: usize) -> Mask {
    let r = f64::from(width) / 2.0;
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let p = [x as f64, y as f64];
            let d = line
                .windows(2)
                .map(|s| oracle_seg_dist_sq(p, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            if d <= r * r + 1e-9 {
                m.set(x, y, 1);
            }
        }
    }
    m
}

pub fn check_rasterize_oracle(seed: u64, cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(2..7);
        // some points fall outside the canvas on purpose
        let line: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-20.0..148.0), rng.gen_range(-20.0..148.0)]).collect();
        let width = [1, 2, 3, 8, 13][case % 5];
        let got = rasterize_lane(&line, width, (128, 128));
        let want = oracle_raster(&line, width, 128);
        let diff = got.data.iter().zip(&want.data).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 0, "case {case}: {diff} pixels differ");
    }
}

pub fn check_letterbox_720p() {
    let lb = Letterbox::new((1280, 720), (640, 384));
    assert_eq!(lb.scale, 0.5);
    assert_eq!(lb.new_size, (640, 360));
    assert_eq!(lb.pad, (0, 12));
    let bottom_pad = lb.dst_size.1 - lb.new_size.1 - lb.pad.1;
    assert_eq!(bottom_pad, 12);
    assert_eq!(lb.forward_box([100.0, 200.0, 300.0, 400.0]), [50.0, 112.0, 150.0, 212.0]);

    let img = Image::filled(1280, 720, [1.0, 0.0, 0.0]);
    let out = lb.apply_image(&img);
    assert_eq!((out.width, out.height), (640, 384));
    assert_eq!(out.pixel(5, 5), [PAD_GRAY; 3]);
    assert_eq!(out.pixel(5, 380), [PAD_GRAY; 3]);
    assert_eq!(out.pixel(5, 12), [1.0, 0.0, 0.0]);
    assert_eq!(out.pixel(639, 371), [1.0, 0.0, 0.0]);
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    let mut img = Image::filled(w, h, [0.0; 3]);
    for v in &mut img.data {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

pub fn random_sample(rng: &mut ChaCha8Rng, w: usize, h: usize, tag: &str) -> Sample {
    let objects = (0..rng.gen_range(1..5))
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..w as f64 - 4.0), rng.gen_range(0.0..h as f64 - 4.0));
            let b = [x, y, (x + rng.gen_range(2.0..20.0)).min(w as f64), (y + rng.gen_range(2.0..20.0)).min(h as f64)];
            ObjectLabel::new(rng.gen_range(0..3), b)
        })
        .collect();
    Sample {
        image: random_image(rng, w, h),
        objects,
        drivable: random_mask(rng, w, h, 0.3),
        lane: random_mask(rng, w, h, 0.3),
        meta: SampleMeta::new(tag),
    }
}

/// Unscaled mosaic tiles are pure translations around the split point.
pub fn check_mosaic_pixels(seed: u64, cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let samples: Vec<Sample> = (0..4).map(|i| random_sample(&mut rng, 40, 30, &format!("s{i}"))).collect();
        let placement = MosaicPlacement {
            canvas: (64, 48),
            center: (rng.gen_range(16..=48), rng.gen_range(12..=36)),
            scales: [1.0; 4],
        };
        let m = mosaic_with([&samples[0], &samples[1], &samples[2], &samples[3]], &placement);
        let (xc, yc) = (placement.center.0 as isize, placement.center.1 as isize);
        for y in 0..48isize {
            for x in 0..64isize {
                let i = usize::from(x >= xc) + 2 * usize::from(y >= yc);
                // tile corner nearest the split point sits on it
                let ox = if i % 2 == 0 { xc - 40 } else { xc };
                let oy = if i < 2 { yc - 30 } else { yc };
                let (sx, sy) = (x - ox, y - oy);
                let inside = (0..40).contains(&sx) && (0..30).contains(&sy);
                let (px, mx, lx) = if inside {
                    let s = &samples[i];
                    let (sx, sy) = (sx as usize, sy as usize);
                    (s.image.pixel(sx, sy), s.drivable.get(sx, sy), s.lane.get(sx, sy))
                } else {
                    ([PAD_GRAY; 3], 0, 0)
                };
                let (x, y) = (x as usize, y as usize);
                assert_eq!(m.image.pixel(x, y), px, "({x}, {y})");
                assert_eq!(m.drivable.get(x, y), mx);
                assert_eq!(m.lane.get(x, y), lx);
            }
        }
        m.validate().unwrap();
    }
}

/// Mosaic boxes: scale, translate, clip to the quadrant, keep at least 10%.
pub fn check_mosaic_boxes(seed: u64, cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let samples: Vec<Sample> = (0..4).map(|i| random_sample(&mut rng, 40, 30, &format!("s{i}"))).collect();
        let placement = MosaicPlacement {
            canvas: (64, 48),
            center: (rng.gen_range(16..=48), rng.gen_range(12..=36)),
            scales: std::array::from_fn(|_| rng.gen_range(0.5..1.5)),
        };
        let m = mosaic_with([&samples[0], &samples[1], &samples[2], &samples[3]], &placement);
        let (xc, yc) = (placement.center.0 as f64, placement.center.1 as f64);
        let mut want = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let nw = (40.0 * placement.scales[i]).round();
            let nh = (30.0 * placement.scales[i]).round();
            let (ox, oy) = (if i % 2 == 0 { xc - nw } else { xc }, if i < 2 { yc - nh } else { yc });
            let (qx0, qx1) = if i % 2 == 0 { (0.0, xc) } else { (xc, 64.0) };
            let (qy0, qy1) = if i < 2 { (0.0, yc) } else { (yc, 48.0) };
            for o in &s.objects {
                let b = [
                    o.bbox[0] * nw / 40.0 + ox,
                    o.bbox[1] * nh / 30.0 + oy,
                    o.bbox[2] * nw / 40.0 + ox,
                    o.bbox[3] * nh / 30.0 + oy,
                ];
                let c = [b[0].max(qx0).min(qx1), b[1].max(qy0).min(qy1), b[2].max(qx0).min(qx1), b[3].max(qy0).min(qy1)];
                let full = (b[2] - b[0]) * (b[3] - b[1]);
                let kept = (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
                if kept > 0.0 && kept >= 0.1 * full {
                    want.push((o.class_id, c));
                }
            }
        }
        assert_eq!(m.objects.len(), want.len());
        for (o, (cls, b)) in m.objects.iter().zip(&want) {
            assert_eq!(o.class_id, *cls);
            for k in 0..4 {
                assert!((o.bbox[k] - b[k]).abs() < 1e-9, "{:?} vs {b:?}", o.bbox);
            }
        }
    }
}

/// Convex pixel blend, mask union, label union weighted by lambda.
pub fn check_mixup(seed: u64, cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let a = random_sample(&mut rng, 24, 16, "a");
        let b = random_sample(&mut rng, 24, 16, "b");
        let lambda = mixup_lambda(&mut rng);
        assert!((0.0..=1.0).contains(&lambda));
        let m = mixup(&a, &b, lambda).unwrap();
        let l = lambda as f32;
        for i in 0..a.image.data.len() {
            assert_eq!(m.image.data[i], (l * a.image.data[i] + (1.0 - l) * b.image.data[i]).clamp(0.0, 1.0));
        }
        for i in 0..a.drivable.data.len() {
            assert_eq!(m.drivable.data[i], a.drivable.data[i] | b.drivable.data[i]);
            assert_eq!(m.lane.data[i], a.lane.data[i] | b.lane.data[i]);
        }
        assert_eq!(m.objects.len(), a.objects.len() + b.objects.len());
        for (o, src) in m.objects.iter().zip(a.objects.iter().chain(&b.objects)) {
            assert_eq!((o.class_id, o.bbox), (src.class_id, src.bbox));
        }
        let wa: f64 = m.objects[..a.objects.len()].iter().map(|o| o.weight).sum();
        let wb: f64 = m.objects[a.objects.len()..].iter().map(|o| o.weight).sum();
        assert!((wa - lambda * a.objects.len() as f64).abs() < 1e-12);
        assert!((wb - (1.0 - lambda) * b.objects.len() as f64).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- schedule

/// Linear warmup from zero, then cosine down to `lr0 * f` at the last step.
pub fn closed_form_lr(step: usize, cfg: &TrainConfig, spe: usize) -> f64 {
    let (lr0, f) = (cfg.initial_lr, cfg.final_lr_fraction);
    let w = (cfg.warmup_epochs * spe) as f64;
    let last = (cfg.total_epochs * spe - 1) as f64;
    let s = step as f64;
    if s < w {
        lr0 * s / w
    } else {
        lr0 * f + lr0 * (1.0 - f) * (1.0 + (std::f64::consts::PI * (s - w) / (last - w)).cos()) / 2.0
    }
}

pub fn check_lr_end_of_warmup() {
    let cfg = TrainConfig::default();
    for spe in [1, 7, 100] {
        assert_eq!(lr_at(3 * spe, &cfg, spe), 0.01);
        assert_eq!(lr_at(0, &cfg, spe), 0.0);
        let last = 50 * spe - 1;
        assert!((lr_at(last, &cfg, spe) - 0.01 * 0.01).abs() < 1e-15);
        assert_eq!(lr_at(last + 10, &cfg, spe), lr_at(last, &cfg, spe));
    }
}

/// The jump across the warmup junction is no larger than one warmup step.
pub fn check_lr_continuity(cfg: &TrainConfig, spe: usize) {
    let w = cfg.warmup_epochs * spe;
    let step_jump = cfg.initial_lr / w as f64;
    let jump = (lr_at(w, cfg, spe) - lr_at(w - 1, cfg, spe)).abs();
    assert!(jump <= step_jump + 1e-15, "jump {jump} at the junction");
}

/// Returns the largest absolute deviation from the closed form.
pub fn check_lr_closed_form(seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        total_epochs: 40,
        warmup_epochs: 4,
        ..TrainConfig::default()
    };
    let spe = 13;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let s = rng.gen_range(0..40 * spe);
        let (got, want) = (lr_at(s, &cfg, spe), closed_form_lr(s, &cfg, spe));
        assert!((got - want).abs() < 1e-12, "step {s}: {got} vs {want}");
        worst = worst.max((got - want).abs());
    }
    worst
}
