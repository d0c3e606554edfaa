//! Synthetic road scenes with exact labels.
//!
//! Each scene has a sky/ground backdrop, a trapezoidal road (the drivable
//! area), one to three painted lane markings annotated by the two edges of
//! their stripe, and non-overlapping coloured rectangles as vehicles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{entry_paths, write_json, LabelFile, LaneFile};
use super::{
    load_manifest, rasterize_lane, write_image, write_mask, DatasetManifest, Image, LaneAnnotation, Mask, ObjectLabel,
    Sample, SampleMeta, Split,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    pub train_lane_width: u32,
    pub test_lane_width: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 160,
            train: 16,
            val: 0,
            test: 0,
            min_objects: 2,
            max_objects: 5,
            seed: 0,
            train_lane_width: 8,
            test_lane_width: 2,
        }
    }
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn lane_width(&self, split: Split) -> u32 {
        if split == Split::Train {
            self.train_lane_width
        } else {
            self.test_lane_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!("synthetic images must be at least 32x32, got {}x{}", self.width, self.height)));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        Ok(())
    }
}

/// Seed for one scene, mixed from the dataset seed, split and index.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generated scene with the generator's own lane geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Lane mask rasterized from the generator centerlines.
    pub sample: Sample,
    pub lanes: Vec<LaneAnnotation>,
    pub centerlines: Vec<Vec<[f64; 2]>>,
}

const VEHICLE_COLORS: [[f32; 3]; 6] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.25, 0.85],
    [0.95, 0.75, 0.05],
    [0.10, 0.65, 0.20],
    [0.60, 0.15, 0.70],
    [0.95, 0.45, 0.05],
];

fn inside_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn jitter<R: Rng>(rgb: [f32; 3], amount: f32, rng: &mut R) -> [f32; 3] {
    rgb.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

pub fn synth_scene<R: Rng>(width: usize, height: usize, objects: (usize, usize), lane_width: u32, rng: &mut R) -> SynthScene {
    let (w, h) = (width as f64, height as f64);
    let horizon = (h * rng.gen_range(0.35..0.45)).round();
    let sky = jitter([0.55, 0.70, 0.90], 0.08, rng);
    let ground = jitter([0.35, 0.50, 0.25], 0.08, rng);
    let road = {
        let g = rng.gen_range(0.30..0.45);
        [g, g, g + 0.02]
    };
    let mut image = Image::filled(width, height, sky);
    for y in horizon as usize..height {
        for x in 0..width {
            image.set_pixel(x, y, ground);
        }
    }

    let vx = w * rng.gen_range(0.4..0.6);
    let top_half = w * rng.gen_range(0.02..0.06);
    let bottom_left = w * rng.gen_range(-0.2..0.15);
    let bottom_right = w * rng.gen_range(0.85..1.2);
    let polygon = [[vx - top_half, horizon], [vx + top_half, horizon], [bottom_right, h], [bottom_left, h]];
    let mut drivable = Mask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            if inside_polygon([x as f64 + 0.5, y as f64 + 0.5], &polygon) {
                drivable.set(x, y, 1);
                image.set_pixel(x, y, road);
            }
        }
    }

    let n_lanes = rng.gen_range(1..=3usize);
    let mut lanes = Vec::new();
    let mut centerlines = Vec::new();
    let mut lane = Mask::new(width, height);
    let paint = if rng.gen_bool(0.5) { [0.95, 0.95, 0.95] } else { [0.95, 0.85, 0.20] };
    for j in 0..n_lanes {
        let f = (j as f64 + rng.gen_range(0.3..0.7)) / n_lanes as f64;
        let f = 0.15 + 0.7 * f;
        let (top_x, bot_x) = (vx - top_half + f * 2.0 * top_half, bottom_left + f * (bottom_right - bottom_left));
        let bend = w * rng.gen_range(-0.04..0.04);
        let (y0, y1) = (horizon + 2.0, h - 1.0);
        let stripe = rng.gen_range(2.0..3.5) * (w / 256.0).max(0.5);
        let center: Vec<[f64; 2]> = (0..=8)
            .map(|k| {
                let t = k as f64 / 8.0;
                [top_x + t * (bot_x - top_x) + bend * 4.0 * t * (1.0 - t), y0 + t * (y1 - y0)]
            })
            .collect();
        let painted = rasterize_lane(&center, (stripe.round() as u32).max(1), (width, height));
        for (i, &v) in painted.data.iter().enumerate() {
            if v != 0 {
                image.set_pixel(i % width, i / width, paint);
            }
        }
        let band = rasterize_lane(&center, lane_width, (width, height));
        lane = lane.union(&band).expect("same canvas");
        lanes.push(LaneAnnotation {
            left: center.iter().map(|p| [p[0] - stripe / 2.0, p[1]]).collect(),
            right: center.iter().map(|p| [p[0] + stripe / 2.0, p[1]]).collect(),
        });
        centerlines.push(center);
    }

    let n_obj = rng.gen_range(objects.0..=objects.1);
    let mut boxes: Vec<[usize; 4]> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_obj {
        for _attempt in 0..50 {
            let bw = ((w * rng.gen_range(0.06..0.2)).round() as usize).max(4);
            let bh = ((bw as f64 * rng.gen_range(0.6..1.0)).round() as usize).max(4);
            if bw >= width || bh >= height {
                break;
            }
            let ymin = (horizon as usize).saturating_sub(bh / 2);
            if ymin > height - bh {
                break;
            }
            let x0 = rng.gen_range(0..=width - bw);
            let y0 = rng.gen_range(ymin..=height - bh);
            let b = [x0, y0, x0 + bw, y0 + bh];
            // one pixel of clearance keeps every box's pixels its own
            if boxes
                .iter()
                .any(|o| b[0] <= o[2] && o[0] <= b[2] && b[1] <= o[3] && o[1] <= b[3])
            {
                continue;
            }
            let body = jitter(VEHICLE_COLORS[rng.gen_range(0..VEHICLE_COLORS.len())], 0.05, rng);
            let glass = body.map(|c| c * 0.35);
            for y in b[1]..b[3] {
                for x in b[0]..b[2] {
                    let in_window = y < b[1] + bh / 3 && x >= b[0] + bw / 5 && x < b[2] - bw / 5;
                    image.set_pixel(x, y, if in_window { glass } else { body });
                }
            }
            boxes.push(b);
            labels.push(ObjectLabel::new(0, b.map(|v| v as f64)));
            break;
        }
    }

    SynthScene {
        sample: Sample {
            image,
            objects: labels,
            drivable,
            lane,
            meta: SampleMeta::new("synthetic"),
        },
        lanes,
        centerlines,
    }
}

/// Write a synthetic dataset under `root` and return the manifests of the
/// generated splits. Output is a pure function of the config.
pub fn synth_generate(root: &Path, cfg: &SynthConfig) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        let n = cfg.count(split);
        if n == 0 {
            continue;
        }
        let width = cfg.lane_width(split);
        for i in 0..n {
            let id = format!("{split}_{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, split, i));
            let scene = synth_scene(cfg.width, cfg.height, (cfg.min_objects, cfg.max_objects), width, &mut rng);
            let e = entry_paths(root, split, &id);
            write_image(&e.image, &scene.sample.image)?;
            write_json(
                &e.labels,
                &LabelFile {
                    objects: scene.sample.objects.clone(),
                },
            )?;
            write_mask(&e.drivable, &scene.sample.drivable)?;
            write_json(&e.lanes, &LaneFile { lanes: scene.lanes.clone() })?;
            write_mask(&e.lane_cache(width), &scene.sample.lane)?;
        }
        out.push(load_manifest(root, split, width)?);
    }
    Ok(out)
}
