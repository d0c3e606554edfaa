//! Anchor fitting by k-means on box sizes.

use rand::Rng;

/// IoU of two boxes sharing a corner, from their sizes alone.
pub fn wh_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// `k` anchor sizes clustering `sizes` under the `1 − IoU` distance,
/// sorted by area. Returns `None` when there are fewer boxes than anchors.
pub fn kmeans_anchors<R: Rng>(sizes: &[[f64; 2]], k: usize, iterations: usize, rng: &mut R) -> Option<Vec<[f64; 2]>> {
    let sizes: Vec<[f64; 2]> = sizes.iter().copied().filter(|s| s[0] > 0.0 && s[1] > 0.0).collect();
    if sizes.len() < k || k == 0 {
        return None;
    }
    // k-means++ seeding
    let mut centers = vec![sizes[rng.gen_range(0..sizes.len())]];
    while centers.len() < k {
        let d: Vec<f64> = sizes
            .iter()
            .map(|s| {
                let best = centers.iter().map(|c| 1.0 - wh_iou(*s, *c)).fold(f64::INFINITY, f64::min);
                best * best
            })
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            centers.push(sizes[rng.gen_range(0..sizes.len())]);
            continue;
        }
        let mut r = rng.gen::<f64>() * total;
        let mut pick = sizes.len() - 1;
        for (i, v) in d.iter().enumerate() {
            if r < *v {
                pick = i;
                break;
            }
            r -= v;
        }
        centers.push(sizes[pick]);
    }
    for _ in 0..iterations {
        let mut sum = vec![[0.0f64; 2]; k];
        let mut count = vec![0usize; k];
        for s in &sizes {
            let (best, _) = centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, wh_iou(*s, *c)))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            sum[best][0] += s[0];
            sum[best][1] += s[1];
            count[best] += 1;
        }
        let mut moved = false;
        for i in 0..k {
            if count[i] > 0 {
                let c = [sum[i][0] / count[i] as f64, sum[i][1] / count[i] as f64];
                moved |= c != centers[i];
                centers[i] = c;
            }
        }
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    Some(centers)
}
