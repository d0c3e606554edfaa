//! Single-image inference, overlay rendering and the speed benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::check_input_size;
use crate::data::{read_image, Image, Letterbox, Mask};
use crate::error::{Error, Result};
use crate::heads::Detection;
use crate::model::PerceptionModel;
use crate::tensor::{Element, Tensor};
use crate::training::{decode_outputs, unletterbox};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub preprocess_ms: f64,
    pub forward_ms: f64,
    pub postprocess_ms: f64,
}

/// Predictions for one image, in that image's own coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionResult {
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
    pub drivable_mask: Mask,
    pub lane_mask: Mask,
    pub timing: Timing,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    width: usize,
    height: usize,
    detections: &'a [Detection],
    drivable_pixels: usize,
    lane_pixels: usize,
    timing: Timing,
}

impl PerceptionResult {
    /// Detections, mask pixel counts and timings; the masks themselves are
    /// written as PNGs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ResultJson {
            width: self.width,
            height: self.height,
            detections: &self.detections,
            drivable_pixels: self.drivable_mask.count(),
            lane_pixels: self.lane_mask.count(),
            timing: self.timing,
        })
        .expect("result serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub input_size: (usize, usize),
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            input_size: (640, 384),
            conf_threshold: 0.25,
            nms_iou_threshold: 0.45,
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Letterbox to the network size, predict, and map every output back.
/// Any image size is accepted.
pub fn predict_image<T: Element>(model: &PerceptionModel<T>, image: &Image, opts: &InferOptions) -> Result<PerceptionResult> {
    check_input_size(opts.input_size.0, opts.input_size.1)?;
    if image.width == 0 || image.height == 0 {
        return Err(Error::Input("empty image".into()));
    }
    let t0 = Instant::now();
    let lb = Letterbox::new((image.width, image.height), opts.input_size);
    let net = lb.apply_image(image);
    let preprocess_ms = ms(t0);

    let t1 = Instant::now();
    let out = model.infer(net.to_tensor::<T>())?;
    let forward_ms = ms(t1);

    let t2 = Instant::now();
    let mut preds = decode_outputs(model, &out, opts.conf_threshold, opts.nms_iou_threshold);
    let p = unletterbox(preds.remove(0), &lb);
    let postprocess_ms = ms(t2);
    Ok(PerceptionResult {
        width: image.width,
        height: image.height,
        detections: p.detections,
        drivable_mask: p.drivable,
        lane_mask: p.lane,
        timing: Timing {
            preprocess_ms,
            forward_ms,
            postprocess_ms,
        },
    })
}

pub fn run_inference<T: Element>(model: &PerceptionModel<T>, path: &Path, opts: &InferOptions) -> Result<PerceptionResult> {
    let image = read_image(path)?;
    predict_image(model, &image, opts)
}

pub const DRIVABLE_TINT: [f32; 3] = [0.0, 1.0, 0.0];
pub const DRIVABLE_ALPHA: f32 = 0.4;
pub const LANE_COLOR: [f32; 3] = [1.0, 0.0, 0.0];

/// Fixed per-class box color.
pub fn class_color(class_id: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 6] = [
        [1.0, 0.85, 0.0],
        [0.0, 0.75, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.5, 0.0],
        [0.5, 0.0, 1.0],
        [0.0, 1.0, 0.6],
    ];
    PALETTE[class_id % PALETTE.len()]
}

// 3x5 glyphs, one row per entry, bit 2 = left column
const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 1, 1]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('.', [0, 0, 0, 0, 2]),
];

fn draw_text(img: &mut Image, x0: isize, y0: isize, text: &str, rgb: [f32; 3]) {
    let mut x = x0;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (4 >> dx) != 0 {
                        let (px, py) = (x + dx as isize, y0 + dy as isize);
                        if px >= 0 && py >= 0 && (px as usize) < img.width && (py as usize) < img.height {
                            img.set_pixel(px as usize, py as usize, rgb);
                        }
                    }
                }
            }
        }
        x += 4;
    }
}

/// Pixel bounds `(x0, y0, x1, y1)` (inclusive) of a box on the half-open grid.
pub fn box_pixel_bounds(b: [f64; 4], width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = b[0].round().max(0.0) as usize;
    let y0 = b[1].round().max(0.0) as usize;
    let x1 = (b[2].round() as isize - 1).min(width as isize - 1);
    let y1 = (b[3].round() as isize - 1).min(height as isize - 1);
    (x1 >= x0 as isize && y1 >= y0 as isize).then_some((x0, y0, x1 as usize, y1 as usize))
}

/// Drivable area tinted green, lane pixels red, and one-pixel box outlines
/// labelled `class confidence`.
pub fn render_overlay(image: &Image, result: &PerceptionResult) -> Result<Image> {
    let (w, h) = (image.width, image.height);
    for m in [&result.drivable_mask, &result.lane_mask] {
        if (m.width, m.height) != (w, h) {
            return Err(Error::Shape(format!("{}x{} mask for a {w}x{h} image", m.width, m.height)));
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if result.lane_mask.get(x, y) != 0 {
                out.set_pixel(x, y, LANE_COLOR);
            } else if result.drivable_mask.get(x, y) != 0 {
                let p = out.pixel(x, y);
                let a = DRIVABLE_ALPHA;
                out.set_pixel(x, y, [0, 1, 2].map(|c| (1.0 - a) * p[c] + a * DRIVABLE_TINT[c]));
            }
        }
    }
    for d in &result.detections {
        let Some((x0, y0, x1, y1)) = box_pixel_bounds(d.bbox, w, h) else {
            continue;
        };
        let color = class_color(d.class_id);
        for x in x0..=x1 {
            out.set_pixel(x, y0, color);
            out.set_pixel(x, y1, color);
        }
        for y in y0..=y1 {
            out.set_pixel(x0, y, color);
            out.set_pixel(x1, y, color);
        }
        let label = format!("{} {:.2}", d.class_id, d.confidence);
        let ty = if y0 >= 7 { y0 as isize - 7 } else { y0 as isize + 2 };
        draw_text(&mut out, x0 as isize + 1, ty, &label, color);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub input_size: (usize, usize),
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// Forward passes per second, postprocessing excluded.
    pub fps: f64,
    pub forward_ms_mean: f64,
    /// Decode + NMS time per image, measured separately.
    pub postprocess_ms_mean: f64,
    pub param_count: usize,
    pub hardware: String,
}

impl BenchmarkReport {
    pub fn to_text(&self) -> String {
        format!(
            "protocol: batch {}, {} timed forward passes after {} warmup, float32, postprocessing timed separately\n\
             input: {}x{}\nhardware: {}\nparams: {}\nforward: {:.2} ms/image\nspeed: {:.2} fps\npostprocess: {:.2} ms/image\n",
            self.batch_size,
            self.iterations,
            self.warmup,
            self.input_size.0,
            self.input_size.1,
            self.hardware,
            self.param_count,
            self.forward_ms_mean,
            self.fps,
            self.postprocess_ms_mean
        )
    }
}

/// CPU model name and thread count.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu} ({threads} threads), {}", std::env::consts::OS)
}

pub const DEFAULT_BENCH_WARMUP: usize = 5;

/// Time batch-1 forward passes on a mid-gray input.
pub fn benchmark<T: Element>(
    model: &PerceptionModel<T>,
    input_size: (usize, usize),
    iterations: usize,
    warmup: usize,
) -> Result<BenchmarkReport> {
    check_input_size(input_size.0, input_size.1)?;
    if iterations == 0 {
        return Err(Error::Config("benchmark needs at least one iteration".into()));
    }
    let x = Tensor::<T>::full(&[1, 3, input_size.1, input_size.0], T::from_f64_lossy(0.5));
    for _ in 0..warmup {
        model.infer(x.clone())?;
    }
    let mut forward = 0.0;
    let mut post = 0.0;
    for _ in 0..iterations {
        let t = Instant::now();
        let out = model.infer(x.clone())?;
        forward += t.elapsed().as_secs_f64();
        let t = Instant::now();
        decode_outputs(model, &out, 0.25, 0.45);
        post += t.elapsed().as_secs_f64();
    }
    let n = iterations as f64;
    Ok(BenchmarkReport {
        input_size,
        batch_size: 1,
        iterations,
        warmup,
        fps: n / forward,
        forward_ms_mean: forward * 1e3 / n,
        postprocess_ms_mean: post * 1e3 / n,
        param_count: model.param_count(),
        hardware: hardware_string(),
    })
}
