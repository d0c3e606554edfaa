//! Reading and writing the on-disk dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{rasterize_lanes, Image, LaneAnnotation, Mask, ObjectLabel, Sample, SampleMeta, Split};
use crate::error::{Error, Result};

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer does not match its size".into()))?;
    ensure_parent(path)?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Grayscale PNG; any non-zero value is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect(),
    })
}

/// Foreground written as 255.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let raw = m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(m.width as u32, m.height as u32, raw)
        .ok_or_else(|| Error::Shape("mask buffer does not match its size".into()))?;
    ensure_parent(path)?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelFile {
    pub objects: Vec<ObjectLabel>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneFile {
    pub lanes: Vec<LaneAnnotation>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub drivable: PathBuf,
    pub lanes: PathBuf,
}

/// A file that could not be used, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// Width of rasterized lane masks for this split.
    pub lane_mask_width: u32,
    pub entries: Vec<ManifestEntry>,
    pub issues: Vec<LoadIssue>,
}

pub(crate) fn image_dir(root: &Path, split: Split) -> PathBuf {
    root.join("images").join(split.as_str())
}

pub(crate) fn label_dir(root: &Path, split: Split) -> PathBuf {
    root.join("labels").join(split.as_str())
}

pub(crate) fn entry_paths(root: &Path, split: Split, id: &str) -> ManifestEntry {
    let labels = label_dir(root, split);
    ManifestEntry {
        id: id.to_string(),
        image: image_dir(root, split).join(format!("{id}.png")),
        labels: labels.join(format!("{id}.json")),
        drivable: labels.join(format!("{id}_drivable.png")),
        lanes: labels.join(format!("{id}_lanes.json")),
    }
}

impl ManifestEntry {
    pub fn lane_cache(&self, width: u32) -> PathBuf {
        self.labels.with_file_name(format!("{}_lane_w{width}.png", self.id))
    }
}

/// Scan one split. Entries whose label files are missing or malformed are
/// left out and listed in `issues`; a missing or empty split directory
/// yields an empty manifest.
pub fn load_manifest(root: &Path, split: Split, lane_mask_width: u32) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            message: "dataset root is not a directory".into(),
        });
    }
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        lane_mask_width,
        entries: Vec::new(),
        issues: Vec::new(),
    };
    let dir = image_dir(root, split);
    let mut ids: Vec<String> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect(),
        Err(_) => Vec::new(),
    };
    ids.sort();
    if ids.is_empty() {
        log::warn!("no images under {}", dir.display());
    }
    for id in ids {
        let e = entry_paths(root, split, &id);
        let mut problem = None;
        if let Err(err) = read_json::<LabelFile>(&e.labels) {
            problem = Some((e.labels.clone(), err.to_string()));
        } else if !e.drivable.is_file() {
            problem = Some((e.drivable.clone(), "missing drivable-area mask".to_string()));
        } else if let Err(err) = read_json::<LaneFile>(&e.lanes) {
            problem = Some((e.lanes.clone(), err.to_string()));
        }
        match problem {
            Some((path, message)) => {
                log::warn!("skipping {id}: {}: {message}", path.display());
                manifest.issues.push(LoadIssue { path, message });
            }
            None => manifest.entries.push(e),
        }
    }
    Ok(manifest)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lane_annotations(&self, i: usize) -> Result<Vec<LaneAnnotation>> {
        Ok(read_json::<LaneFile>(&self.entries[i].lanes)?.lanes)
    }

    pub fn objects(&self, i: usize) -> Result<Vec<ObjectLabel>> {
        Ok(read_json::<LabelFile>(&self.entries[i].labels)?.objects)
    }

    /// Lane mask at this split's width, from the cache when present.
    pub fn lane_mask(&self, i: usize, size: (usize, usize)) -> Result<Mask> {
        let cache = self.entries[i].lane_cache(self.lane_mask_width);
        if cache.is_file() {
            let m = read_mask(&cache)?;
            if (m.width, m.height) == size {
                return Ok(m);
            }
            log::warn!("ignoring stale lane cache {}", cache.display());
        }
        rasterize_lanes(&self.lane_annotations(i)?, self.lane_mask_width, size)
    }

    /// Full-resolution sample `i`.
    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let image = read_image(&e.image)?;
        let size = (image.width, image.height);
        let drivable = read_mask(&e.drivable)?;
        if (drivable.width, drivable.height) != size {
            return Err(Error::Load {
                path: e.drivable.clone(),
                message: format!("mask is {}x{}, image is {}x{}", drivable.width, drivable.height, size.0, size.1),
            });
        }
        let lane = self.lane_mask(i, size)?;
        let objects = self.objects(i)?;
        let s = Sample {
            image,
            objects,
            drivable,
            lane,
            meta: SampleMeta::new(e.id.clone()),
        };
        s.validate().map_err(|err| Error::Load {
            path: e.labels.clone(),
            message: err.to_string(),
        })?;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Rasterize and cache lane masks for every entry of a split at `width`.
/// Returns the number of masks written.
pub fn prep_lanes(root: &Path, split: Split, width: u32) -> Result<usize> {
    let manifest = load_manifest(root, split, width)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        let (w, h) = image::image_dimensions(&e.image).map_err(|err| Error::image(&e.image, err))?;
        let mask = rasterize_lanes(&manifest.lane_annotations(i)?, width, (w as usize, h as usize))?;
        write_mask(&e.lane_cache(width), &mask)?;
    }
    Ok(manifest.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::new(5, 3);
        m.set(4, 2, 1);
        m.set(0, 0, 1);
        let p = dir.path().join("m.png");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_is_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set_pixel(2, 1, [0.2, 0.4, 0.6]);
        let p = dir.path().join("i.png");
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn missing_root_is_an_error_empty_split_is_not() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(&dir.path().join("nope"), Split::Train, 8).is_err());
        let m = load_manifest(dir.path(), Split::Train, 8).unwrap();
        assert!(m.is_empty() && m.issues.is_empty());
    }
}
