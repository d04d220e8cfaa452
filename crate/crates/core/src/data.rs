//! Shared data model: boxes, label masks, images, samples and the dataset
//! manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DET_CLASSES: usize = 4;
pub const DET_CLASS_NAMES: [&str; NUM_DET_CLASSES] = ["pedestrian", "vehicle", "scooter", "bicycle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetClass {
    Pedestrian = 0,
    Vehicle = 1,
    Scooter = 2,
    Bicycle = 3,
}

impl DetClass {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(DetClass::Pedestrian),
            1 => Some(DetClass::Vehicle),
            2 => Some(DetClass::Scooter),
            3 => Some(DetClass::Bicycle),
            _ => None,
        }
    }
}

/// Axis-aligned box in absolute pixel coordinates, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Argument(format!("degenerate box {self:?}")));
        }
        if self.class_id >= NUM_DET_CLASSES {
            return Err(Error::Argument(format!("class id {} out of range", self.class_id)));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn diagonal(&self) -> f32 {
        self.width().hypot(self.height())
    }

    /// Clip to `[0,w]×[0,h]`; `None` if nothing with positive area remains.
    pub fn clamp(&self, w: f32, h: f32) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
            class_id: self.class_id,
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    /// Smallest box enclosing both.
    pub fn union_box(&self, other: &BBox, class_id: usize) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
            class_id,
        }
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f32 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union of two boxes; class ids are ignored.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A predicted box with its confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f32,
}

/// Label set of a segmentation mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    /// background, main_lane, alternative_lane
    Drivable,
    /// background, single_line, double_line, dashed_line
    Lane,
    /// six-class union of the two
    Merged,
}

impl Palette {
    pub fn num_classes(self) -> usize {
        match self {
            Palette::Drivable => 3,
            Palette::Lane => 4,
            Palette::Merged => 6,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Palette::Drivable => &["background", "main_lane", "alternative_lane"],
            Palette::Lane => &["background", "single_line", "double_line", "dashed_line"],
            Palette::Merged => &[
                "background",
                "main_lane",
                "alternative_lane",
                "single_line",
                "double_line",
                "dashed_line",
            ],
        }
    }
}

pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const MAIN_LANE: u8 = 1;
    pub const ALTERNATIVE_LANE: u8 = 2;
    pub const SINGLE_LINE: u8 = 1;
    pub const DOUBLE_LINE: u8 = 2;
    pub const DASHED_LINE: u8 = 3;
}

/// Per-pixel class map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub palette: Palette,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn background(height: usize, width: usize, palette: Palette) -> Self {
        Self {
            height,
            width,
            palette,
            labels: vec![0; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, palette: Palette, labels: Vec<u8>) -> Result<Self> {
        let m = Self {
            height,
            width,
            palette,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "mask has {} labels for {}x{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        let n = self.palette.num_classes() as u8;
        if let Some(bad) = self.labels.iter().find(|&&l| l >= n) {
            return Err(Error::Argument(format!(
                "label {bad} invalid for palette {:?}",
                self.palette
            )));
        }
        Ok(())
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Nearest-neighbor resampling with pixel-center alignment; an integer
    /// upscale replicates each label into a block.
    pub fn resize_nearest(&self, height: usize, width: usize) -> SegMask {
        let ys: Vec<usize> = (0..height)
            .map(|y| (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1))
            .collect();
        let xs: Vec<usize> = (0..width)
            .map(|x| (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1))
            .collect();
        let mut labels = Vec::with_capacity(height * width);
        for &sy in &ys {
            for &sx in &xs {
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        SegMask {
            height,
            width,
            palette: self.palette,
            labels,
        }
    }
}

/// Row-major HWC RGB image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// CHW planar copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    /// Bilinear resize (half-pixel centers, no antialiasing).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let chw = self.to_chw();
        let (ih, iw) = (self.height, self.width);
        let mut out = vec![0.0; 3 * height * width];
        for c in 0..3 {
            crate::engine::kernels::resize_plane(
                &chw[c * ih * iw..(c + 1) * ih * iw],
                ih,
                iw,
                &mut out[c * height * width..(c + 1) * height * width],
                height,
                width,
            );
        }
        Image::from_chw(height, width, &out)
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Self {
        let hw = height * width;
        let mut img = Self::new(height, width);
        for i in 0..hw {
            for c in 0..3 {
                img.data[i * 3 + c] = chw[c * hw + i];
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub drivable: SegMask,
    pub lane: SegMask,
    pub source_id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Checks every cross-field invariant of a sample.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height, self.image.width);
        if self.image.data.len() != h * w * 3 {
            return Err(Error::Shape(format!("image buffer does not match {h}x{w}")));
        }
        for (mask, palette) in [(&self.drivable, Palette::Drivable), (&self.lane, Palette::Lane)] {
            mask.validate()?;
            if mask.palette != palette {
                return Err(Error::Argument(format!("mask palette {:?}, expected {palette:?}", mask.palette)));
            }
            if mask.height != h || mask.width != w {
                return Err(Error::Shape(format!(
                    "mask {}x{} vs image {h}x{w}",
                    mask.height, mask.width
                )));
            }
        }
        for b in &self.boxes {
            b.validate()?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as f32 || b.y2 > h as f32 {
                return Err(Error::Argument(format!("box {b:?} outside {h}x{w} image")));
            }
        }
        Ok(())
    }
}

/// One record of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub boxes: Vec<BBox>,
    pub drivable_mask_path: PathBuf,
    pub lane_mask_path: PathBuf,
}

/// A manifest record with paths resolved; pixel data is read on [`load`].
///
/// [`load`]: SampleDescriptor::load
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDescriptor {
    pub entry: ManifestEntry,
    pub base_dir: PathBuf,
    pub height: usize,
    pub width: usize,
}

impl SampleDescriptor {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self) -> PathBuf {
        self.resolve(&self.entry.image_path)
    }

    pub fn load(&self) -> Result<Sample> {
        let image = read_rgb_png(&self.image_path())?;
        let drivable = read_label_png(&self.resolve(&self.entry.drivable_mask_path), Palette::Drivable)?;
        let lane = read_label_png(&self.resolve(&self.entry.lane_mask_path), Palette::Lane)?;
        let sample = Sample {
            image,
            boxes: self.entry.boxes.clone(),
            drivable,
            lane,
            source_id: self.entry.id.clone(),
        };
        sample.validate().map_err(|e| Error::Manifest {
            id: self.entry.id.clone(),
            reason: e.to_string(),
        })?;
        Ok(sample)
    }
}

/// Reads a manifest and checks every entry against its image headers.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleDescriptor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    entries
        .into_iter()
        .map(|entry| {
            let mut d = SampleDescriptor {
                entry,
                base_dir: base_dir.clone(),
                height: 0,
                width: 0,
            };
            let bad = |reason: String| Error::Manifest {
                id: d.entry.id.clone(),
                reason,
            };
            let (iw, ih) = png_dims(&d.image_path()).map_err(|e| bad(e.to_string()))?;
            for p in [&d.entry.drivable_mask_path, &d.entry.lane_mask_path] {
                let (mw, mh) = png_dims(&d.resolve(p)).map_err(|e| bad(e.to_string()))?;
                if (mw, mh) != (iw, ih) {
                    return Err(bad(format!(
                        "mask {} is {mw}x{mh} but image is {iw}x{ih}",
                        p.display()
                    )));
                }
            }
            for b in &d.entry.boxes {
                b.validate().map_err(|e| bad(e.to_string()))?;
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > iw as f32 || b.y2 > ih as f32 {
                    return Err(bad(format!("box {b:?} outside the {iw}x{ih} image")));
                }
            }
            d.width = iw;
            d.height = ih;
            Ok(d)
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every sample of a manifest (parallel, manifest order preserved).
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let descs = load_manifest(path)?;
    descs.par_iter().map(SampleDescriptor::load).collect()
}

fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let reader = decoder.read_info().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

fn read_png_u8(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let img_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let (w, h, color, buf) = read_png_u8(path)?;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported color type {other:?}"),
            })
        }
    };
    let mut img = Image::new(h, w);
    for (i, px) in buf.chunks(channels).enumerate() {
        let rgb = if channels >= 3 {
            [px[0], px[1], px[2]]
        } else {
            [px[0]; 3]
        };
        for c in 0..3 {
            img.data[i * 3 + c] = rgb[c] as f32 / 255.0;
        }
    }
    Ok(img)
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path, img.width, img.height, png::ColorType::Rgb, &bytes)
}

pub fn read_label_png(path: &Path, palette: Palette) -> Result<SegMask> {
    let (w, h, color, buf) = read_png_u8(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("label image must be single-channel, got {color:?}"),
        });
    }
    SegMask::from_labels(h, w, palette, buf).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_label_png(path: &Path, mask: &SegMask) -> Result<()> {
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, &mask.labels)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(bytes).map_err(img_err)?;
    writer.finish().map_err(img_err)
}
