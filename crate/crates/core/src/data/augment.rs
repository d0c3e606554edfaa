//! Letterbox resizing, mosaic, mixup and photometric jitter.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{Image, Mask, ObjectLabel, Sample, SampleMeta, TransformRecord, PAD_GRAY};
use crate::config::check_input_size;
use crate::error::{Error, Result};
use crate::heads::BoxXyxy;

/// Mosaic keeps a clipped box only if this much of its area survives.
pub const MOSAIC_MIN_AREA_FRACTION: f64 = 0.1;
/// Beta(α, α) parameter of the mixup ratio.
pub const MIXUP_BETA: f64 = 32.0;
const HSV_GAINS: [f64; 3] = [0.015, 0.7, 0.4];

/// Bilinear resize with half-pixel centres.
pub fn resize_image(img: &Image, nw: usize, nh: usize) -> Image {
    if (nw, nh) == (img.width, img.height) {
        return img.clone();
    }
    let mut out = Image::filled(nw, nh, [0.0; 3]);
    let (fx, fy) = (img.width as f64 / nw as f64, img.height as f64 / nh as f64);
    let axis = |d: usize, f: f64, n: usize| {
        let s = ((d as f64 + 0.5) * f - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for y in 0..nh {
        let (y0, y1, ty) = axis(y, fy, img.height);
        for x in 0..nw {
            let (x0, x1, tx) = axis(x, fx, img.width);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bot = c[k] + (d[k] - c[k]) * tx;
                px[k] = top + (bot - top) * ty;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Nearest-neighbour resize: destination pixel `d` reads source pixel
/// `floor((d + 0.5) · n / m)`.
pub fn resize_mask(m: &Mask, nw: usize, nh: usize) -> Mask {
    if (nw, nh) == (m.width, m.height) {
        return m.clone();
    }
    let xs: Vec<usize> = (0..nw)
        .map(|x| (((x as f64 + 0.5) * m.width as f64 / nw as f64) as usize).min(m.width - 1))
        .collect();
    let mut out = Mask::new(nw, nh);
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * m.height as f64 / nh as f64) as usize).min(m.height - 1);
        for (x, &sx) in xs.iter().enumerate() {
            out.set(x, y, m.get(sx, sy));
        }
    }
    out
}

/// Aspect-preserving resize into a fixed canvas with centred padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub src_size: (usize, usize),
    pub dst_size: (usize, usize),
    /// `min(dst_w / src_w, dst_h / src_h)`.
    pub scale: f64,
    /// Size of the resized content.
    pub new_size: (usize, usize),
    /// Left and top padding; right/bottom take the remainder.
    pub pad: (usize, usize),
}

impl Letterbox {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let scale = (dst.0 as f64 / src.0 as f64).min(dst.1 as f64 / src.1 as f64);
        let nw = ((src.0 as f64 * scale).round() as usize).clamp(1, dst.0);
        let nh = ((src.1 as f64 * scale).round() as usize).clamp(1, dst.1);
        Self {
            src_size: src,
            dst_size: dst,
            scale,
            new_size: (nw, nh),
            pad: ((dst.0 - nw) / 2, (dst.1 - nh) / 2),
        }
    }

    fn factors(&self) -> (f64, f64) {
        (
            self.new_size.0 as f64 / self.src_size.0 as f64,
            self.new_size.1 as f64 / self.src_size.1 as f64,
        )
    }

    pub fn forward_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.factors();
        [p[0] * sx + self.pad.0 as f64, p[1] * sy + self.pad.1 as f64]
    }

    pub fn inverse_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.factors();
        [(p[0] - self.pad.0 as f64) / sx, (p[1] - self.pad.1 as f64) / sy]
    }

    pub fn forward_box(&self, b: BoxXyxy) -> BoxXyxy {
        let a = self.forward_point([b[0], b[1]]);
        let c = self.forward_point([b[2], b[3]]);
        [a[0], a[1], c[0], c[1]]
    }

    /// Map a box back to source pixels, clipped to the source image.
    pub fn inverse_box(&self, b: BoxXyxy) -> BoxXyxy {
        let a = self.inverse_point([b[0], b[1]]);
        let c = self.inverse_point([b[2], b[3]]);
        let (w, h) = (self.src_size.0 as f64, self.src_size.1 as f64);
        [a[0].clamp(0.0, w), a[1].clamp(0.0, h), c[0].clamp(0.0, w), c[1].clamp(0.0, h)]
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let inner = resize_image(img, self.new_size.0, self.new_size.1);
        let mut out = Image::filled(self.dst_size.0, self.dst_size.1, [PAD_GRAY; 3]);
        for y in 0..inner.height {
            let src = &inner.data[y * inner.width * 3..(y + 1) * inner.width * 3];
            let off = ((y + self.pad.1) * out.width + self.pad.0) * 3;
            out.data[off..off + src.len()].copy_from_slice(src);
        }
        out
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        let inner = resize_mask(m, self.new_size.0, self.new_size.1);
        let mut out = Mask::new(self.dst_size.0, self.dst_size.1);
        for y in 0..inner.height {
            let off = (y + self.pad.1) * out.width + self.pad.0;
            out.data[off..off + inner.width].copy_from_slice(&inner.data[y * inner.width..(y + 1) * inner.width]);
        }
        out
    }

    /// Network-size mask back to source resolution (nearest).
    pub fn inverse_mask(&self, m: &Mask) -> Mask {
        let (sw, sh) = self.src_size;
        let (fx, fy) = self.factors();
        let mut out = Mask::new(sw, sh);
        for y in 0..sh {
            let ny = (((y as f64 + 0.5) * fy) as usize).min(self.new_size.1 - 1) + self.pad.1;
            for x in 0..sw {
                let nx = (((x as f64 + 0.5) * fx) as usize).min(self.new_size.0 - 1) + self.pad.0;
                out.set(x, y, m.get(nx.min(m.width - 1), ny.min(m.height - 1)));
            }
        }
        out
    }
}

/// Letterbox a sample: image bilinear, masks nearest, boxes by the same
/// affine map. The transform is appended to the sample's record.
pub fn resize_letterbox(s: &Sample, out: (usize, usize)) -> Result<Sample> {
    check_input_size(out.0, out.1)?;
    let lb = Letterbox::new((s.width(), s.height()), out);
    let mut meta = s.meta.clone();
    meta.transforms.push(TransformRecord::Letterbox(lb));
    Ok(Sample {
        image: lb.apply_image(&s.image),
        objects: s
            .objects
            .iter()
            .map(|o| ObjectLabel {
                bbox: lb.forward_box(o.bbox),
                ..*o
            })
            .collect(),
        drivable: lb.apply_mask(&s.drivable),
        lane: lb.apply_mask(&s.lane),
        meta,
    })
}

/// Where the four mosaic tiles go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicPlacement {
    pub canvas: (usize, usize),
    /// Split point; tile `i` occupies quadrant `i` in reading order.
    pub center: (usize, usize),
    /// Per-tile resize factor.
    pub scales: [f64; 4],
}

impl MosaicPlacement {
    /// Top-left corner of tile `i` once resized to `size`, which touches
    /// the split point with the corner nearest to it.
    pub fn offset(&self, i: usize, size: (usize, usize)) -> (isize, isize) {
        let (xc, yc) = (self.center.0 as isize, self.center.1 as isize);
        let (w, h) = (size.0 as isize, size.1 as isize);
        match i {
            0 => (xc - w, yc - h),
            1 => (xc, yc - h),
            2 => (xc - w, yc),
            _ => (xc, yc),
        }
    }

    /// Canvas region `[x0, x1) × [y0, y1)` of quadrant `i`.
    pub fn quadrant(&self, i: usize) -> (usize, usize, usize, usize) {
        let (xc, yc) = self.center;
        let (w, h) = self.canvas;
        match i {
            0 => (0, xc, 0, yc),
            1 => (xc, w, 0, yc),
            2 => (0, xc, yc, h),
            _ => (xc, w, yc, h),
        }
    }
}

/// Random split point in the middle half of the canvas and per-tile scales
/// of 0.5–1.0 times the fit-to-canvas factor.
pub fn random_mosaic_placement<R: Rng>(samples: &[&Sample; 4], canvas: (usize, usize), rng: &mut R) -> MosaicPlacement {
    let (w, h) = canvas;
    let center = (rng.gen_range(w / 4..=3 * w / 4), rng.gen_range(h / 4..=3 * h / 4));
    let scales = std::array::from_fn(|i| {
        let s = samples[i];
        let fit = (w as f64 / s.width() as f64).min(h as f64 / s.height() as f64);
        fit * rng.gen_range(0.5..=1.0)
    });
    MosaicPlacement { canvas, center, scales }
}

pub fn mosaic<R: Rng>(samples: [&Sample; 4], canvas: (usize, usize), rng: &mut R) -> Sample {
    let placement = random_mosaic_placement(&samples, canvas, rng);
    mosaic_with(samples, &placement)
}

/// Compose four samples around the split point with a fixed placement.
pub fn mosaic_with(samples: [&Sample; 4], placement: &MosaicPlacement) -> Sample {
    let (cw, ch) = placement.canvas;
    let mut image = Image::filled(cw, ch, [PAD_GRAY; 3]);
    let mut drivable = Mask::new(cw, ch);
    let mut lane = Mask::new(cw, ch);
    let mut objects = Vec::new();
    let mut sources = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        sources.push(s.meta.source.clone());
        let nw = ((s.width() as f64 * placement.scales[i]).round() as usize).max(1);
        let nh = ((s.height() as f64 * placement.scales[i]).round() as usize).max(1);
        let img = resize_image(&s.image, nw, nh);
        let dm = resize_mask(&s.drivable, nw, nh);
        let lm = resize_mask(&s.lane, nw, nh);
        let (ox, oy) = placement.offset(i, (nw, nh));
        let (qx0, qx1, qy0, qy1) = placement.quadrant(i);
        for y in qy0..qy1 {
            let sy = y as isize - oy;
            if sy < 0 || sy >= nh as isize {
                continue;
            }
            for x in qx0..qx1 {
                let sx = x as isize - ox;
                if sx < 0 || sx >= nw as isize {
                    continue;
                }
                let (sx, sy) = (sx as usize, sy as usize);
                image.set_pixel(x, y, img.pixel(sx, sy));
                drivable.set(x, y, dm.get(sx, sy));
                lane.set(x, y, lm.get(sx, sy));
            }
        }
        let (fx, fy) = (nw as f64 / s.width() as f64, nh as f64 / s.height() as f64);
        for o in &s.objects {
            let b = [
                o.bbox[0] * fx + ox as f64,
                o.bbox[1] * fy + oy as f64,
                o.bbox[2] * fx + ox as f64,
                o.bbox[3] * fy + oy as f64,
            ];
            let full = (b[2] - b[0]) * (b[3] - b[1]);
            let c = [
                b[0].clamp(qx0 as f64, qx1 as f64),
                b[1].clamp(qy0 as f64, qy1 as f64),
                b[2].clamp(qx0 as f64, qx1 as f64),
                b[3].clamp(qy0 as f64, qy1 as f64),
            ];
            let kept = (c[2] - c[0]) * (c[3] - c[1]);
            if full > 0.0 && c[2] > c[0] && c[3] > c[1] && kept >= MOSAIC_MIN_AREA_FRACTION * full {
                objects.push(ObjectLabel { bbox: c, ..*o });
            }
        }
    }
    Sample {
        image,
        objects,
        drivable,
        lane,
        meta: SampleMeta {
            source: sources.join("+"),
            transforms: vec![TransformRecord::Mosaic(placement.clone())],
        },
    }
}

/// Mixup ratio drawn from Beta(32, 32).
pub fn mixup_lambda<R: Rng>(rng: &mut R) -> f64 {
    Beta::new(MIXUP_BETA, MIXUP_BETA).expect("valid beta").sample(rng)
}

/// Blend two equally sized samples: pixels `λ·a + (1−λ)·b`, boxes of both
/// kept with weights scaled by `λ` and `1−λ`, masks OR-ed.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Input(format!(
            "mixup of {}x{} and {}x{} samples",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("mixup ratio {lambda} outside [0, 1]")));
    }
    let l = lambda as f32;
    let data = a
        .image
        .data
        .iter()
        .zip(&b.image.data)
        .map(|(&x, &y)| (l * x + (1.0 - l) * y).clamp(0.0, 1.0))
        .collect();
    let mut objects: Vec<ObjectLabel> = a
        .objects
        .iter()
        .map(|o| ObjectLabel {
            weight: o.weight * lambda,
            ..*o
        })
        .collect();
    objects.extend(b.objects.iter().map(|o| ObjectLabel {
        weight: o.weight * (1.0 - lambda),
        ..*o
    }));
    let mut meta = a.meta.clone();
    meta.source = format!("{}|{}", a.meta.source, b.meta.source);
    meta.transforms.push(TransformRecord::Mixup { lambda });
    Ok(Sample {
        image: Image {
            width: a.width(),
            height: a.height(),
            data,
        },
        objects,
        drivable: a.drivable.union(&b.drivable)?,
        lane: a.lane.union(&b.lane)?,
        meta,
    })
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let (w, h) = (s.width(), s.height());
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            out.image.set_pixel(x, y, s.image.pixel(w - 1 - x, y));
            out.drivable.set(x, y, s.drivable.get(w - 1 - x, y));
            out.lane.set(x, y, s.lane.get(w - 1 - x, y));
        }
    }
    for o in &mut out.objects {
        let b = o.bbox;
        o.bbox = [w as f64 - b[2], b[1], w as f64 - b[0], b[3]];
    }
    out.meta.transforms.push(TransformRecord::FlipHorizontal);
    out
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Random hue/saturation/value gains; labels are unchanged.
pub fn hsv_jitter<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    let gains: [f64; 3] = std::array::from_fn(|i| 1.0 + rng.gen_range(-HSV_GAINS[i]..=HSV_GAINS[i]));
    let mut out = s.clone();
    for px in out.image.data.chunks_exact_mut(3) {
        let [h, sat, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb([
            h * gains[0] as f32,
            (sat * gains[1] as f32).clamp(0.0, 1.0),
            (v * gains[2] as f32).clamp(0.0, 1.0),
        ]);
        px.copy_from_slice(&rgb.map(|c| c.clamp(0.0, 1.0)));
    }
    out.meta.transforms.push(TransformRecord::Hsv { gains });
    out
}

/// Augmentation switches and rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub use_mosaic: bool,
    pub use_mixup: bool,
    pub use_flip: bool,
    pub use_hsv: bool,
    pub mosaic_prob: f64,
    /// Applied on top of a mosaic, blending in a second mosaic.
    pub mixup_prob: f64,
    /// Mosaic and mixup are switched off for this many final epochs.
    pub close_mosaic_epochs: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            use_mosaic: true,
            use_mixup: true,
            use_flip: false,
            use_hsv: false,
            mosaic_prob: 1.0,
            mixup_prob: 0.15,
            close_mosaic_epochs: 10,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            use_mosaic: false,
            use_mixup: false,
            use_flip: false,
            use_hsv: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [("mosaic_prob", self.mosaic_prob), ("mixup_prob", self.mixup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Builds training samples of one fixed size from a pool of source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPipeline {
    pub input_size: (usize, usize),
    pub config: AugmentConfig,
}

impl AugmentPipeline {
    /// Sample `index` of `pool`, augmented. `mosaic_allowed` is false during
    /// the closing epochs. All randomness comes from `rng`.
    pub fn sample<R: Rng>(&self, pool: &[Sample], index: usize, mosaic_allowed: bool, rng: &mut R) -> Result<Sample> {
        let c = &self.config;
        let pick4 = |first: usize, rng: &mut R| -> [usize; 4] {
            [first, rng.gen_range(0..pool.len()), rng.gen_range(0..pool.len()), rng.gen_range(0..pool.len())]
        };
        let mut s = if c.use_mosaic && mosaic_allowed && rng.gen::<f64>() < c.mosaic_prob {
            let idx = pick4(index, rng);
            let m = mosaic(idx.map(|i| &pool[i]), self.input_size, rng);
            if c.use_mixup && rng.gen::<f64>() < c.mixup_prob {
                let first = rng.gen_range(0..pool.len());
                let idx2 = pick4(first, rng);
                let other = mosaic(idx2.map(|i| &pool[i]), self.input_size, rng);
                mixup(&m, &other, mixup_lambda(rng))?
            } else {
                m
            }
        } else {
            resize_letterbox(&pool[index], self.input_size)?
        };
        if c.use_flip && rng.gen_bool(0.5) {
            s = flip_horizontal(&s);
        }
        if c.use_hsv {
            s = hsv_jitter(&s, rng);
        }
        Ok(s)
    }
}
