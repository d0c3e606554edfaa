//! Samples, dataset layout, lane preprocessing and augmentation.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! images/{split}/{id}.png              RGB image
//! labels/{split}/{id}.json             {"objects": [{"class": 0, "box": [x1, y1, x2, y2]}]}
//! labels/{split}/{id}_drivable.png     grayscale, non-zero = drivable
//! labels/{split}/{id}_lanes.json       {"lanes": [{"left": [[x, y], ...], "right": [[x, y], ...]}]}
//! labels/{split}/{id}_lane_w{N}.png    cached lane mask rasterized at width N
//! ```
//!
//! Boxes are in pixels on the half-open pixel grid: a box `[x1, y1, x2, y2]`
//! covers pixel columns `x1..x2`. Lane polylines use pixel-index coordinates,
//! pixel `(x, y)` sitting at the point `(x, y)`.

mod anchors;
mod augment;
mod io;
mod lanes;
mod synth;

pub use anchors::{kmeans_anchors, wh_iou};
pub use augment::{
    flip_horizontal, hsv_jitter, mixup, mixup_lambda, mosaic, mosaic_with, random_mosaic_placement, resize_image,
    resize_letterbox, resize_mask, AugmentConfig, AugmentPipeline, Letterbox, MosaicPlacement, MOSAIC_MIN_AREA_FRACTION,
};
pub use io::{load_manifest, LabelFile, LaneFile, prep_lanes, read_image, read_mask, write_image, write_mask, DatasetManifest, LoadIssue, ManifestEntry};
pub use lanes::{lane_centerline, polyline_distance_sq, rasterize_lane, rasterize_lanes, MIN_CENTERLINE_POINTS};
pub use synth::{scene_seed, synth_generate, synth_scene, SynthConfig, SynthScene};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BoxXyxy;
use crate::tensor::{Element, Tensor};

/// Letterbox padding gray level.
pub const PAD_GRAY: f32 = 114.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

/// RGB image, row-major `h × w × 3`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(3, h, w)` planes appended to `out`.
    pub fn write_chw<T: Element>(&self, out: &mut Vec<T>) {
        let hw = self.width * self.height;
        for c in 0..3 {
            out.extend((0..hw).map(|p| T::from_f64_lossy(f64::from(self.data[p * 3 + c]))));
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let mut v = Vec::with_capacity(self.width * self.height * 3);
        self.write_chw(&mut v);
        Tensor::from_vec(&[1, 3, self.height, self.width], v).expect("image tensor shape")
    }
}

/// Stack same-sized images into a `(b, 3, h, w)` tensor.
pub fn images_to_tensor<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut v = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {w}x{h} images",
                im.width, im.height
            )));
        }
        im.write_chw(&mut v);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], v)
}

/// Binary mask, row-major `h × w`, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixelwise OR of two equally sized masks.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| u8::from(a != 0 || b != 0)).collect(),
        })
    }

    /// Foreground where class 1 wins in `(2, h, w)` logits of batch item `n`.
    pub fn from_logits<T: Element>(t: &Tensor<T>, n: usize) -> Mask {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 2, "two-class logits");
        let base = n * 2 * h * w;
        let d = t.data();
        Mask {
            width: w,
            height: h,
            data: (0..h * w).map(|i| u8::from(d[base + h * w + i] > d[base + i])).collect(),
        }
    }
}

/// One labelled object; `weight` is below 1 only after mixup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

impl ObjectLabel {
    pub fn new(class_id: usize, bbox: BoxXyxy) -> Self {
        Self {
            class_id,
            bbox,
            weight: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]).max(0.0) * (self.bbox[3] - self.bbox[1]).max(0.0)
    }
}

/// A lane marking annotated by the two edges of its painted stripe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneAnnotation {
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
}

/// Geometric or photometric step applied to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformRecord {
    Letterbox(Letterbox),
    Mosaic(MosaicPlacement),
    Mixup { lambda: f64 },
    FlipHorizontal,
    Hsv { gains: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub transforms: Vec<TransformRecord>,
}

impl SampleMeta {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            transforms: Vec::new(),
        }
    }

    /// The letterbox step, when it is the only geometric transform.
    pub fn letterbox(&self) -> Option<&Letterbox> {
        self.transforms.iter().find_map(|t| match t {
            TransformRecord::Letterbox(l) => Some(l),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub objects: Vec<ObjectLabel>,
    pub drivable: Mask,
    pub lane: Mask,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width, self.image.height);
        if self.image.data.len() != w * h * 3 {
            return Err(Error::Shape("image buffer does not match its size".into()));
        }
        for m in [&self.drivable, &self.lane] {
            if (m.width, m.height) != (w, h) || m.data.len() != w * h {
                return Err(Error::Shape(format!("{}x{} mask on {w}x{h} image", m.width, m.height)));
            }
        }
        for o in &self.objects {
            let b = o.bbox;
            if !(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w as f64 && b[3] <= h as f64 && b[0] <= b[2] && b[1] <= b[3]) {
                return Err(Error::Annotation(format!("box {b:?} outside {w}x{h} image")));
            }
        }
        Ok(())
    }
}

/// Paint the pixels covered by a box (half-open grid) into a mask.
pub fn paint_box(mask: &mut Mask, b: BoxXyxy) {
    let x0 = b[0].max(0.0).round() as usize;
    let y0 = b[1].max(0.0).round() as usize;
    let x1 = (b[2].round().max(0.0) as usize).min(mask.width);
    let y1 = (b[3].round().max(0.0) as usize).min(mask.height);
    for y in y0..y1 {
        for x in x0..x1 {
            mask.set(x, y, 1);
        }
    }
}
