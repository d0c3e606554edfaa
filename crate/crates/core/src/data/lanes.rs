//! Two-line lane annotations to centerlines and raster masks.

use super::{LaneAnnotation, Mask};
use crate::error::{Error, Result};

/// Minimum number of resampled points per centerline.
pub const MIN_CENTERLINE_POINTS: usize = 16;

/// Squared-distance slack so band edges at exact integer distances are kept.
const DIST_SLACK: f64 = 1e-9;

fn cumulative_length(line: &[[f64; 2]]) -> Vec<f64> {
    let mut acc = vec![0.0];
    for w in line.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        acc.push(acc.last().unwrap() + d);
    }
    acc
}

/// `k` points evenly spaced by arclength along `line`, endpoints included.
fn resample(line: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let acc = cumulative_length(line);
    let total = *acc.last().unwrap();
    if total == 0.0 {
        return vec![line[0]; k];
    }
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for i in 0..k {
        let s = total * i as f64 / (k - 1) as f64;
        while seg + 2 < acc.len() && acc[seg + 1] < s {
            seg += 1;
        }
        let len = acc[seg + 1] - acc[seg];
        let t = if len > 0.0 { ((s - acc[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (line[seg], line[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Centerline of a two-line lane annotation.
///
/// Both lines are resampled to `K = max(vertex counts, 16)` points evenly
/// spaced by arclength; centerline point `i` is the midpoint of the `i`-th
/// points of the two lines.
pub fn lane_centerline(ann: &LaneAnnotation) -> Result<Vec<[f64; 2]>> {
    for (name, line) in [("left", &ann.left), ("right", &ann.right)] {
        if line.len() < 2 {
            return Err(Error::Annotation(format!("{name} lane line has {} point(s), need 2", line.len())));
        }
        if line.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Annotation(format!("{name} lane line has non-finite coordinates")));
        }
    }
    let k = ann.left.len().max(ann.right.len()).max(MIN_CENTERLINE_POINTS);
    let l = resample(&ann.left, k);
    let r = resample(&ann.right, k);
    Ok(l.iter().zip(&r).map(|(a, b)| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]).collect())
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy));
    ex * ex + ey * ey
}

/// Squared distance from `p` to the nearest point of a polyline.
pub fn polyline_distance_sq(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [a] => segment_distance_sq(p, *a, *a),
        _ => line
            .windows(2)
            .map(|w| segment_distance_sq(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Set every pixel within `width / 2` of the polyline into `mask`.
fn draw_band(mask: &mut Mask, center: &[[f64; 2]], width: u32) -> bool {
    let r = f64::from(width) / 2.0;
    let r2 = r * r + DIST_SLACK;
    let (w, h) = (mask.width as f64, mask.height as f64);
    let mut touched = false;
    let segments: Vec<[[f64; 2]; 2]> = if center.len() == 1 {
        vec![[center[0], center[0]]]
    } else {
        center.windows(2).map(|s| [s[0], s[1]]).collect()
    };
    for [a, b] in segments {
        let x0 = (a[0].min(b[0]) - r).floor().max(0.0);
        let x1 = (a[0].max(b[0]) + r).ceil().min(w - 1.0);
        let y0 = (a[1].min(b[1]) - r).floor().max(0.0);
        let y1 = (a[1].max(b[1]) + r).ceil().min(h - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if segment_distance_sq([x as f64, y as f64], a, b) <= r2 {
                    mask.set(x, y, 1);
                    touched = true;
                }
            }
        }
    }
    touched
}

/// Raster mask of a centerline: pixels within `width / 2` of it are 1.
pub fn rasterize_lane(center: &[[f64; 2]], width: u32, canvas: (usize, usize)) -> Mask {
    let mut mask = Mask::new(canvas.0, canvas.1);
    if !draw_band(&mut mask, center, width) {
        log::warn!("lane polyline does not intersect the {}x{} canvas", canvas.0, canvas.1);
    }
    mask
}

/// Union of the rasterized centerlines of several annotations.
pub fn rasterize_lanes(anns: &[LaneAnnotation], width: u32, canvas: (usize, usize)) -> Result<Mask> {
    let mut mask = Mask::new(canvas.0, canvas.1);
    for a in anns {
        let c = lane_centerline(a)?;
        draw_band(&mut mask, &c, width);
    }
    Ok(mask)
}
