//! Raster, box and dataset types shared by every stage of the toolkit.
//!
//! Boxes are pixel-aligned `(x, y, w, h)` with a top-left origin and a
//! half-open extent `[x, x + w) × [y, y + h)`, so areas are exact integers.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class label used when a detector or annotation does not name one.
pub const DEFAULT_CLASS: &str = "person";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u8),
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("failed to read image {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to encode png: {0}")]
    Encode(#[source] image::ImageError),
}

/// An 8-bit raster, grayscale (1 channel) or RGB (3 channels), row-major and
/// channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ImageError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, ImageError> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; len])
    }

    /// Builds a grayscale image from a function of `(x, y)`.
    pub fn from_fn_gray(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, 1, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Number of interleaved values in one row.
    pub fn stride(&self) -> usize {
        self.width as usize * self.channels as usize
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, c: u8) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.pixels[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, value: u8) {
        let i = self.index(x, y, c);
        self.pixels[i] = value;
    }

    /// The whole-image extent as a box.
    pub fn extent(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height).expect("image dimensions are non-zero")
    }

    /// Luma conversion, `round(0.299 R + 0.587 G + 0.114 B)`. Grayscale
    /// images are returned as a copy.
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|px| luma(px[0], px[1], px[2]))
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Loads an 8-bit PNG (or any format the `image` crate decodes).
    /// Alpha is dropped; 16-bit inputs are narrowed.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let dynamic = image::open(path).map_err(|source| ImageError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(dynamic))
    }

    pub fn from_dynamic(dynamic: image::DynamicImage) -> Self {
        use image::DynamicImage as D;
        let (width, height) = (dynamic.width(), dynamic.height());
        let (channels, pixels) = match dynamic {
            D::ImageLuma8(buf) => (1, buf.into_raw()),
            D::ImageLumaA8(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
                (1, dynamic.to_luma8().into_raw())
            }
            D::ImageRgb8(buf) => (3, buf.into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        Self {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        if self.channels == 1 {
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
                    .expect("buffer length checked at construction"),
            )
        } else {
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
                    .expect("buffer length checked at construction"),
            )
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Write {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(ImageError::Encode)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_dynamic(dynamic))
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

/// Axis-aligned, pixel-aligned box with strictly positive size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl BBox {
    /// Returns `None` when either side is zero.
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Option<Self> {
        (w > 0 && h > 0).then_some(Self { x, y, w, h })
    }

    /// Box spanning the half-open corners `[x0, x1) × [y0, y1)`.
    pub fn from_corners(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x(&self) -> u32 {
        self.x
    }

    pub fn y(&self) -> u32 {
        self.y
    }

    pub fn w(&self) -> u32 {
        self.w
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn max_side(&self) -> u32 {
        self.w.max(self.h)
    }

    pub fn min_side(&self) -> u32 {
        self.w.min(self.h)
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        BBox::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32)
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersect(other).map_or(0, |b| b.area())
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn translate(&self, dx: u32, dy: u32) -> BBox {
        BBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Intersection of `b` with `[0, width) × [0, height)`; `None` when empty.
pub fn clip_box(b: &BBox, width: u32, height: u32) -> Option<BBox> {
    let frame = BBox::new(0, 0, width, height)?;
    b.intersect(&frame)
}

/// A scored, labelled box produced by a detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Confidence in `[0, 1]`.
    pub score: f64,
    pub class_label: String,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_label: impl Into<String>) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0,1]");
        Self {
            bbox,
            score,
            class_label: class_label.into(),
        }
    }
}

/// Total order used everywhere detections are ranked: score descending,
/// then `(x, y, w, h)` ascending, then class label.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.cmp(&b.bbox))
        .then_with(|| a.class_label.cmp(&b.class_label))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_label: String,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_label: impl Into<String>) -> Self {
        Self {
            bbox,
            class_label: class_label.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<GroundTruthBox>,
}

/// The on-disk dataset index: images paired with their ground-truth boxes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("image {path}: box {index}: {reason}")]
    InvalidBox {
        path: String,
        index: usize,
        reason: String,
    },
    #[error("image {path}: dimensions must be at least 1x1")]
    ZeroDimension { path: String },
    #[error("duplicate image path {0}")]
    DuplicatePath(String),
}

// Wire representation. Field order here is the emitted key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    images: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    path: String,
    width: u32,
    height: u32,
    boxes: Vec<BoxDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxDoc {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    class: String,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.path.as_str()) {
                return Err(ManifestError::DuplicatePath(entry.path.clone()));
            }
            if entry.width == 0 || entry.height == 0 {
                return Err(ManifestError::ZeroDimension {
                    path: entry.path.clone(),
                });
            }
            for (index, gt) in entry.boxes.iter().enumerate() {
                if !gt.bbox.fits_in(entry.width, entry.height) {
                    return Err(ManifestError::InvalidBox {
                        path: entry.path.clone(),
                        index,
                        reason: format!(
                            "box {:?} exceeds image {}x{}",
                            gt.bbox, entry.width, entry.height
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical compact JSON followed by a single newline.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let doc = ManifestDoc {
            images: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    path: e.path.clone(),
                    width: e.width,
                    height: e.height,
                    boxes: e
                        .boxes
                        .iter()
                        .map(|gt| BoxDoc {
                            x: gt.bbox.x(),
                            y: gt.bbox.y(),
                            w: gt.bbox.w(),
                            h: gt.bbox.h(),
                            class: gt.class_label.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&doc).expect("manifest serialization is infallible");
        out.push(b'\n');
        out
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ManifestError> {
        let doc: ManifestDoc = serde_json::from_slice(bytes)?;
        let mut entries = Vec::with_capacity(doc.images.len());
        for e in doc.images {
            let mut boxes = Vec::with_capacity(e.boxes.len());
            for (index, b) in e.boxes.into_iter().enumerate() {
                let bbox = BBox::new(b.x, b.y, b.w, b.h).ok_or_else(|| {
                    ManifestError::InvalidBox {
                        path: e.path.clone(),
                        index,
                        reason: format!("zero-sized box w={} h={}", b.w, b.h),
                    }
                })?;
                boxes.push(GroundTruthBox::new(bbox, b.class));
            }
            entries.push(ManifestEntry {
                path: e.path,
                width: e.width,
                height: e.height,
                boxes,
            });
        }
        let manifest = Self { entries };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let bytes = fs::read(path).map_err(|source| ManifestError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetManifest::from_json_bytes(&bytes)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    manifest.validate()?;
    fs::write(path, manifest.to_json_bytes()).map_err(|source| ManifestError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Directory that manifest-relative image paths resolve against.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}
