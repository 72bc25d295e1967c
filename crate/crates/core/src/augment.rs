//! Box-exact geometric augmentations: flips, quarter-turn rotations and
//! nearest-neighbour zoom.

use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    save_manifest, BBox, DatasetManifest, GroundTruthBox, ImageBuffer, ImageError, ManifestEntry,
    ManifestError,
};

pub const ZOOM_MIN: f64 = 0.5;
pub const ZOOM_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation `{0}`")]
    Parse(String),
    #[error("manifest path {0} must be relative and stay inside the dataset root")]
    UnsafePath(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    /// `None` draws a factor from `[ZOOM_MIN, ZOOM_MAX]` per image.
    Zoom(Option<f64>),
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::HFlip => f.write_str("hflip"),
            AugmentOp::VFlip => f.write_str("vflip"),
            AugmentOp::Rot90 => f.write_str("rot90"),
            AugmentOp::Rot180 => f.write_str("rot180"),
            AugmentOp::Rot270 => f.write_str("rot270"),
            AugmentOp::Zoom(None) => f.write_str("zoom"),
            AugmentOp::Zoom(Some(z)) => write!(f, "zoom:{z}"),
        }
    }
}

impl FromStr for AugmentOp {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AugmentError::Parse(s.to_string());
        Ok(match s.trim() {
            "hflip" => AugmentOp::HFlip,
            "vflip" => AugmentOp::VFlip,
            "rot90" => AugmentOp::Rot90,
            "rot180" => AugmentOp::Rot180,
            "rot270" => AugmentOp::Rot270,
            "zoom" => AugmentOp::Zoom(None),
            other => {
                let factor = other.strip_prefix("zoom:").ok_or_else(bad)?;
                let z: f64 = factor.parse().map_err(|_| bad())?;
                if !(z.is_finite() && z > 0.0) {
                    return Err(bad());
                }
                AugmentOp::Zoom(Some(z))
            }
        })
    }
}

/// Ordered augmentation chains. Each chain is applied in sequence and yields
/// one augmented copy of every input image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub chains: Vec<Vec<AugmentOp>>,
    pub seed: u64,
}

impl AugmentSpec {
    /// Parses chains written as comma-separated op lists, e.g. `hflip,zoom:1.5`.
    pub fn parse(chains: &[String], seed: u64) -> Result<Self, AugmentError> {
        let chains = chains
            .iter()
            .map(|c| c.split(',').map(str::parse).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        if chains.is_empty() || chains.iter().any(Vec::is_empty) {
            return Err(AugmentError::Parse(chains_label(&chains)));
        }
        Ok(Self { chains, seed })
    }
}

fn chains_label(chains: &[Vec<AugmentOp>]) -> String {
    chains
        .iter()
        .map(|c| c.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(" ")
}

fn remap(
    img: &ImageBuffer,
    out_w: u32,
    out_h: u32,
    src_of: impl Fn(u32, u32) -> (u32, u32),
) -> ImageBuffer {
    let c = img.channels() as usize;
    let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize * c);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = src_of(x, y);
            let i = img.index(sx, sy, 0);
            pixels.extend_from_slice(&img.pixels()[i..i + c]);
        }
    }
    ImageBuffer::new(out_w, out_h, img.channels(), pixels).expect("dimensions preserved")
}

fn boxed(x: u32, y: u32, w: u32, h: u32) -> BBox {
    BBox::new(x, y, w, h).expect("transformed box keeps its size")
}

fn map_boxes(boxes: &[GroundTruthBox], f: impl Fn(&BBox) -> BBox) -> Vec<GroundTruthBox> {
    boxes
        .iter()
        .map(|b| GroundTruthBox::new(f(&b.bbox), b.class_label.clone()))
        .collect()
}

pub fn hflip(img: &ImageBuffer, boxes: &[GroundTruthBox]) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let out = remap(img, w, h, |x, y| (w - 1 - x, y));
    (out, map_boxes(boxes, |b| boxed(w - b.x() - b.w(), b.y(), b.w(), b.h())))
}

pub fn vflip(img: &ImageBuffer, boxes: &[GroundTruthBox]) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let out = remap(img, w, h, |x, y| (x, h - 1 - y));
    (out, map_boxes(boxes, |b| boxed(b.x(), h - b.y() - b.h(), b.w(), b.h())))
}

/// Clockwise quarter turn; a `W×H` input becomes `H×W`.
pub fn rot90(img: &ImageBuffer, boxes: &[GroundTruthBox]) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let out = remap(img, h, w, |x, y| (y, h - 1 - x));
    (out, map_boxes(boxes, |b| boxed(h - b.y() - b.h(), b.x(), b.h(), b.w())))
}

pub fn rot180(img: &ImageBuffer, boxes: &[GroundTruthBox]) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let out = remap(img, w, h, |x, y| (w - 1 - x, h - 1 - y));
    (
        out,
        map_boxes(boxes, |b| boxed(w - b.x() - b.w(), h - b.y() - b.h(), b.w(), b.h())),
    )
}

/// Counter-clockwise quarter turn.
pub fn rot270(img: &ImageBuffer, boxes: &[GroundTruthBox]) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let out = remap(img, h, w, |x, y| (w - 1 - y, x));
    (out, map_boxes(boxes, |b| boxed(b.y(), w - b.x() - b.w(), b.h(), b.w())))
}

/// Source index sampled by destination index `d` when resizing `src_len`
/// samples to `dst_len`: `floor((d + 0.5) · src_len / dst_len)`.
#[inline]
pub fn nn_source(d: u32, src_len: u32, dst_len: u32) -> u32 {
    ((2 * d as u64 + 1) * src_len as u64 / (2 * dst_len as u64)) as u32
}

/// First destination index whose source index is at least `s`, i.e. the
/// scaled position of edge `s`: `ceil(s · dst_len / src_len − 0.5)`.
#[inline]
pub fn nn_edge(s: u32, src_len: u32, dst_len: u32) -> u32 {
    let num = 2 * s as i64 * dst_len as i64 - src_len as i64;
    if num <= 0 {
        0
    } else {
        let den = 2 * src_len as i64;
        ((num + den - 1) / den) as u32
    }
}

/// Placement of the resized axis inside the original extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fit {
    /// Scaled axis is longer; drop `offset` leading samples.
    Crop(u32),
    /// Scaled axis is shorter; shift right by `offset`, replicating edges.
    Pad(u32),
}

fn fit(len: u32, scaled: u32) -> Fit {
    if scaled >= len {
        Fit::Crop((scaled - len) / 2)
    } else {
        Fit::Pad((len - scaled) / 2)
    }
}

fn zoom_axis_source(d: u32, len: u32, scaled: u32, fit: Fit) -> u32 {
    let s = match fit {
        Fit::Crop(off) => d + off,
        Fit::Pad(off) => d.saturating_sub(off).min(scaled - 1),
    };
    nn_source(s, len, scaled)
}

/// Maps a half-open interval through the zoom, before clipping.
fn zoom_interval(a: u32, b: u32, len: u32, scaled: u32, fit: Fit) -> (i64, i64) {
    let (s0, s1) = (nn_edge(a, len, scaled) as i64, nn_edge(b, len, scaled) as i64);
    match fit {
        Fit::Crop(off) => (s0 - off as i64, s1 - off as i64),
        Fit::Pad(off) => (s0 + off as i64, s1 + off as i64),
    }
}

/// Nearest-neighbour zoom that keeps the frame size. The image is resized to
/// `round(f·W) × round(f·H)`, then centre-cropped (f > 1) or centre-padded
/// with edge replication (f < 1). Boxes follow the resampled pixels exactly,
/// are clipped to the frame, and are dropped when less than half of their
/// scaled area survives.
pub fn zoom(img: &ImageBuffer, boxes: &[GroundTruthBox], factor: f64) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (img.width(), img.height());
    let sw = ((w as f64 * factor).round() as u32).max(1);
    let sh = ((h as f64 * factor).round() as u32).max(1);
    let (fx, fy) = (fit(w, sw), fit(h, sh));
    let out = remap(img, w, h, |x, y| {
        (zoom_axis_source(x, w, sw, fx), zoom_axis_source(y, h, sh, fy))
    });
    let mut kept = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (x0, x1) = zoom_interval(b.bbox.x(), b.bbox.x() + b.bbox.w(), w, sw, fx);
        let (y0, y1) = zoom_interval(b.bbox.y(), b.bbox.y() + b.bbox.h(), h, sh, fy);
        let scaled_area = (x1 - x0).max(0) * (y1 - y0).max(0);
        if scaled_area == 0 {
            continue;
        }
        let (cx0, cx1) = (x0.max(0), x1.min(w as i64));
        let (cy0, cy1) = (y0.max(0), y1.min(h as i64));
        if cx1 <= cx0 || cy1 <= cy0 {
            continue;
        }
        let clipped_area = (cx1 - cx0) * (cy1 - cy0);
        if 2 * clipped_area < scaled_area {
            continue;
        }
        let bbox = BBox::from_corners(cx0 as u32, cy0 as u32, cx1 as u32, cy1 as u32)
            .expect("non-empty clipped box");
        kept.push(GroundTruthBox::new(bbox, b.class_label.clone()));
    }
    (out, kept)
}

/// Applies one op; a sampled zoom draws its factor from `rng`.
pub fn augment(
    img: &ImageBuffer,
    boxes: &[GroundTruthBox],
    op: AugmentOp,
    rng: &mut impl Rng,
) -> (ImageBuffer, Vec<GroundTruthBox>) {
    match op {
        AugmentOp::HFlip => hflip(img, boxes),
        AugmentOp::VFlip => vflip(img, boxes),
        AugmentOp::Rot90 => rot90(img, boxes),
        AugmentOp::Rot180 => rot180(img, boxes),
        AugmentOp::Rot270 => rot270(img, boxes),
        AugmentOp::Zoom(Some(f)) => zoom(img, boxes, f),
        AugmentOp::Zoom(None) => zoom(img, boxes, rng.random_range(ZOOM_MIN..=ZOOM_MAX)),
    }
}

pub fn apply_chain(
    img: &ImageBuffer,
    boxes: &[GroundTruthBox],
    chain: &[AugmentOp],
    rng: &mut impl Rng,
) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let mut cur = (img.clone(), boxes.to_vec());
    for &op in chain {
        cur = augment(&cur.0, &cur.1, op, rng);
    }
    cur
}

fn checked_relative(path: &str) -> Result<PathBuf, AugmentError> {
    let p = Path::new(path);
    if p.components().all(|c| matches!(c, Component::Normal(_))) {
        Ok(p.to_path_buf())
    } else {
        Err(AugmentError::UnsafePath(path.to_string()))
    }
}

/// Writes every chain's copy of every manifest image to `out_dir`, copies
/// the originals alongside, and saves a merged `manifest.json` listing
/// originals followed by augmented copies. Image `i` under chain `k` uses
/// the RNG stream `i · chains + k` of the augmentation seed.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    spec: &AugmentSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, AugmentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AugmentError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut entries = Vec::with_capacity(manifest.len() * (spec.chains.len() + 1));
    let mut augmented = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let rel = checked_relative(&entry.path)?;
        let src = root.join(&rel);
        let img = ImageBuffer::load(&src)?;
        let dst = out_dir.join(&rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        if fs::canonicalize(&src).ok() != fs::canonicalize(&dst).ok() {
            fs::copy(&src, &dst).map_err(io(&dst))?;
        }
        entries.push(entry.clone());

        let stem = rel.with_extension("");
        for (k, chain) in spec.chains.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((i * spec.chains.len() + k) as u64);
            let (out, boxes) = apply_chain(&img, &entry.boxes, chain, &mut rng);
            let name = format!("{}_aug{k}.png", stem.to_string_lossy());
            out.save_png(&out_dir.join(&name))?;
            augmented.push(ManifestEntry {
                path: name,
                width: out.width(),
                height: out.height(),
                boxes,
            });
        }
    }
    entries.extend(augmented);
    let merged = DatasetManifest::new(entries);
    save_manifest(&merged, &out_dir.join("manifest.json"))?;
    Ok(merged)
}
