//! Synthetic scene generation: small target sprites alpha-composited onto
//! backgrounds at random, well-separated positions, with pixel-exact
//! annotations and an optional selective blur over the finished frame.
//!
//! Randomness comes from ChaCha8. Scene `i` of a dataset seeded with `s`
//! draws from `ChaCha8Rng::seed_from_u64(s)` switched to stream `i`, so
//! every scene is independent of scheduling and of the other scenes.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::nn_source;
use crate::enhance::{selective_gaussian_blur, BlurParams};
use crate::model::{
    save_manifest, BBox, DatasetManifest, GroundTruthBox, ImageBuffer, ImageError, ManifestEntry,
    ManifestError, DEFAULT_CLASS,
};
use crate::pipeline::parallel_map;

pub const MAX_PLACEMENT_ATTEMPTS: u32 = 1000;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("failed to read asset {path}: {source}")]
    Asset {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("sprite {0} has no opaque pixels")]
    EmptySprite(PathBuf),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("failed to create {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Empty means procedural sea-like backgrounds of `width × height`.
    pub background_paths: Vec<PathBuf>,
    /// Empty means the built-in bright target shapes.
    pub sprite_paths: Vec<PathBuf>,
    pub scenes: usize,
    pub targets_per_scene: (u32, u32),
    /// Inclusive range for both sides of every placed target.
    pub target_side: (u32, u32),
    /// Minimum edge-to-edge gap between placed boxes.
    pub min_separation: u32,
    pub blur: Option<BlurParams>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub class_label: String,
    pub workers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            background_paths: Vec::new(),
            sprite_paths: Vec::new(),
            scenes: 10,
            targets_per_scene: (1, 5),
            target_side: (5, 50),
            min_separation: 10,
            blur: Some(BlurParams::default()),
            seed: 0,
            width: 1920,
            height: 1080,
            class_label: DEFAULT_CLASS.to_string(),
            workers: crate::pipeline::default_workers(),
        }
    }
}

impl SynthConfig {
    fn validate_ranges(&self) -> Result<(), SynthError> {
        let (t0, t1) = self.targets_per_scene;
        if t0 > t1 {
            return Err(SynthError::Config(format!("targets_per_scene {t0}-{t1} is empty")));
        }
        let (s0, s1) = self.target_side;
        if s0 == 0 || s0 > s1 {
            return Err(SynthError::Config(format!("target_side {s0}-{s1} must be a non-empty range of positive sizes")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Config("procedural frame size must be non-zero".into()));
        }
        if self.class_label.is_empty() {
            return Err(SynthError::Config("class label must not be empty".into()));
        }
        Ok(())
    }
}

/// An RGBA cutout, tight-cropped to its non-transparent pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sprite {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
}

impl Sprite {
    /// Builds a sprite and crops it to the bounding box of pixels with
    /// non-zero alpha. `None` when every pixel is transparent.
    pub fn new(width: u32, height: u32, rgba: Vec<u8>) -> Option<Self> {
        assert_eq!(rgba.len(), width as usize * height as usize * 4);
        Sprite { width, height, rgba }.cropped()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        self.rgba[i..i + 4].try_into().expect("four channels")
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let img = image::open(path)
            .map_err(|source| SynthError::Asset { path: path.to_path_buf(), source })?
            .to_rgba8();
        let (w, h) = img.dimensions();
        Sprite::new(w, h, img.into_raw()).ok_or_else(|| SynthError::EmptySprite(path.to_path_buf()))
    }

    fn opaque_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.pixel(x, y)[3] != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BBox::from_corners(x0, y0, x1, y1).filter(|_| x0 != u32::MAX)
    }

    fn cropped(self) -> Option<Self> {
        let b = self.opaque_bbox()?;
        if b == BBox::new(0, 0, self.width, self.height)? {
            return Some(self);
        }
        let mut rgba = Vec::with_capacity(b.area() as usize * 4);
        for y in b.y()..b.y() + b.h() {
            for x in b.x()..b.x() + b.w() {
                rgba.extend_from_slice(&self.pixel(x, y));
            }
        }
        Some(Sprite { width: b.w(), height: b.h(), rgba })
    }

    /// Nearest-neighbour resize followed by a tight re-crop, since
    /// subsampling can drop sparse edge pixels.
    pub fn resized(&self, width: u32, height: u32) -> Option<Self> {
        let mut rgba = Vec::with_capacity(width as usize * height as usize * 4);
        for y in 0..height {
            let sy = nn_source(y, self.height, height);
            for x in 0..width {
                rgba.extend_from_slice(&self.pixel(nn_source(x, self.width, width), sy));
            }
        }
        Sprite { width, height, rgba }.cropped()
    }
}

/// Decoded backgrounds and sprites for one run.
#[derive(Clone, Debug)]
pub struct SceneAssets {
    pub backgrounds: Vec<ImageBuffer>,
    pub sprites: Vec<Sprite>,
}

impl SceneAssets {
    /// Loads configured assets, substituting built-ins for empty lists.
    /// Procedural backgrounds are drawn later, per scene.
    pub fn load(cfg: &SynthConfig) -> Result<Self, SynthError> {
        let backgrounds = cfg
            .background_paths
            .iter()
            .map(|p| {
                let img = image::open(p)
                    .map_err(|source| SynthError::Asset { path: p.clone(), source })?
                    .to_rgb8();
                let (w, h) = img.dimensions();
                Ok(ImageBuffer::new(w, h, 3, img.into_raw())?)
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        let sprites = if cfg.sprite_paths.is_empty() {
            builtin_sprites()
        } else {
            cfg.sprite_paths.iter().map(|p| Sprite::load(p)).collect::<Result<_, _>>()?
        };
        let assets = Self { backgrounds, sprites };
        assets.check(cfg)?;
        Ok(assets)
    }

    fn check(&self, cfg: &SynthConfig) -> Result<(), SynthError> {
        cfg.validate_ranges()?;
        if self.sprites.is_empty() {
            return Err(SynthError::Config("no sprites available".into()));
        }
        let min_dim = if self.backgrounds.is_empty() {
            cfg.width.min(cfg.height)
        } else {
            self.backgrounds.iter().map(|b| b.width().min(b.height())).min().unwrap_or(0)
        };
        if cfg.target_side.1 > min_dim {
            return Err(SynthError::Config(format!(
                "target_side up to {} does not fit a {min_dim}-pixel background side",
                cfg.target_side.1
            )));
        }
        Ok(())
    }
}

const SPRITE_CANVAS: u32 = 64;

/// Bright solid shapes on a transparent canvas: a person-like blob, a
/// hull, an upright rectangle, a disc and a diamond.
pub fn builtin_sprites() -> Vec<Sprite> {
    type Shape = fn(f64, f64) -> bool;
    let shapes: [(Shape, [u8; 3]); 5] = [
        (
            |u, v| {
                let head = (u - 0.5).powi(2) + (v - 0.15).powi(2) <= 0.15f64.powi(2);
                let body = (0.25..=0.75).contains(&u) && v >= 0.25;
                head || body
            },
            [250, 120, 40],
        ),
        (|u, v| v >= 0.3 && (u - 0.5).abs() <= 0.5 - 0.3 * (v - 0.3), [235, 235, 225]),
        (|u, _| (0.2..=0.8).contains(&u), [245, 210, 60]),
        (|u, v| (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25, [230, 60, 50]),
        (|u, v| (u - 0.5).abs() + (v - 0.5).abs() <= 0.5, [240, 240, 120]),
    ];
    shapes
        .iter()
        .map(|(inside, rgb)| {
            let n = SPRITE_CANVAS;
            let mut rgba = Vec::with_capacity((n * n * 4) as usize);
            for y in 0..n {
                for x in 0..n {
                    let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
                    if inside(u, v) {
                        rgba.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
                    } else {
                        rgba.extend_from_slice(&[0, 0, 0, 0]);
                    }
                }
            }
            Sprite::new(n, n, rgba).expect("shape has opaque pixels")
        })
        .collect()
}

/// Dark water-like frame: a vertical gradient plus small per-pixel noise.
fn procedural_background(width: u32, height: u32, rng: &mut impl Rng) -> ImageBuffer {
    let base: f64 = rng.random_range(30.0..60.0);
    let slope: f64 = rng.random_range(-12.0..12.0);
    let tint = [0.55, 0.8, 1.0];
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        let row = base + slope * (y as f64 / height as f64 - 0.5);
        for _ in 0..width {
            let v = row + rng.random_range(-4.0..4.0);
            for t in tint {
                pixels.push((v * t).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(width, height, 3, pixels).expect("dimensions checked")
}

pub fn scene_rng(seed: u64, scene_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageBuffer,
    pub boxes: Vec<GroundTruthBox>,
    /// Targets that could not be placed within the attempt budget.
    pub unplaced: u32,
}

/// Edge-to-edge gap between two boxes along whichever axis separates them
/// more; zero when they overlap.
pub fn box_gap(a: &BBox, b: &BBox) -> u64 {
    let gx = (b.x() as u64).saturating_sub(a.right()).max((a.x() as u64).saturating_sub(b.right()));
    let gy = (b.y() as u64).saturating_sub(a.bottom()).max((a.y() as u64).saturating_sub(b.bottom()));
    gx.max(gy)
}

/// Samples a sprite scaled so its longer side lies in `side`; the shorter
/// side is clamped into the same range.
fn sample_target(sprites: &[Sprite], side: (u32, u32), rng: &mut impl Rng) -> Option<Sprite> {
    let sprite = &sprites[rng.random_range(0..sprites.len())];
    let long = rng.random_range(side.0..=side.1);
    let (sw, sh) = (sprite.width() as f64, sprite.height() as f64);
    let short = |a: f64, b: f64| ((long as f64 * a / b).round() as u32).clamp(side.0, long);
    let (w, h) = if sprite.width() >= sprite.height() {
        (long, short(sh, sw))
    } else {
        (short(sw, sh), long)
    };
    sprite
        .resized(w, h)
        .filter(|s| (side.0..=side.1).contains(&s.width()) && (side.0..=side.1).contains(&s.height()))
}

fn composite(dst: &mut ImageBuffer, sprite: &Sprite, x0: u32, y0: u32) {
    for y in 0..sprite.height() {
        for x in 0..sprite.width() {
            let [r, g, b, a] = sprite.pixel(x, y);
            if a == 0 {
                continue;
            }
            let a = a as u32;
            for (c, s) in [r, g, b].into_iter().enumerate() {
                let i = dst.index(x0 + x, y0 + y, c as u8);
                let bg = dst.pixels()[i] as u32;
                dst.pixels_mut()[i] = ((s as u32 * a + bg * (255 - a) + 127) / 255) as u8;
            }
        }
    }
}

/// Composes one scene. Each target gets up to [`MAX_PLACEMENT_ATTEMPTS`]
/// draws of sprite, size and position; a target that never fits is counted
/// in `unplaced` and skipped.
pub fn compose_scene(cfg: &SynthConfig, assets: &SceneAssets, rng: &mut impl Rng) -> Scene {
    let mut image = if assets.backgrounds.is_empty() {
        procedural_background(cfg.width, cfg.height, rng)
    } else {
        assets.backgrounds[rng.random_range(0..assets.backgrounds.len())].clone()
    };
    let (w, h) = (image.width(), image.height());
    let n = rng.random_range(cfg.targets_per_scene.0..=cfg.targets_per_scene.1);
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(n as usize);
    let mut unplaced = 0;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let Some(sprite) = sample_target(&assets.sprites, cfg.target_side, rng) else {
                continue;
            };
            let x = rng.random_range(0..=w - sprite.width());
            let y = rng.random_range(0..=h - sprite.height());
            let bbox = BBox::new(x, y, sprite.width(), sprite.height()).expect("sprite is non-empty");
            if boxes.iter().all(|b| box_gap(&b.bbox, &bbox) >= cfg.min_separation as u64) {
                composite(&mut image, &sprite, x, y);
                boxes.push(GroundTruthBox::new(bbox, cfg.class_label.clone()));
                placed = true;
                break;
            }
        }
        if !placed {
            unplaced += 1;
        }
    }
    if let Some(blur) = &cfg.blur {
        image = selective_gaussian_blur(&image, blur);
    }
    Scene { image, boxes, unplaced }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Total targets dropped for lack of space, across all scenes.
    pub unplaced: u32,
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.png")
}

/// Generates `cfg.scenes` scenes into `out_dir` plus a manifest. On failure
/// every file this call wrote is removed again.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    let assets = SceneAssets::load(cfg)?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io { path: out_dir.to_path_buf(), source })?;

    let indices: Vec<usize> = (0..cfg.scenes).collect();
    let results = parallel_map(&indices, cfg.workers, |_, &i| {
        let scene = compose_scene(cfg, &assets, &mut scene_rng(cfg.seed, i as u64));
        let name = scene_file_name(i);
        let path = out_dir.join(&name);
        let written = scene.image.save_png(&path);
        (name, path, scene, written)
    });

    let mut written = Vec::new();
    let mut first_err = None;
    let mut entries = Vec::with_capacity(results.len());
    let mut unplaced = 0;
    for (name, path, scene, res) in results {
        match res {
            Ok(()) => written.push(path),
            Err(e) => {
                first_err.get_or_insert(SynthError::Image(e));
                if path.exists() {
                    written.push(path);
                }
                continue;
            }
        }
        if scene.unplaced > 0 {
            warn!("{name}: placed {} of {} targets", scene.boxes.len(), scene.boxes.len() as u32 + scene.unplaced);
        }
        unplaced += scene.unplaced;
        entries.push(ManifestEntry {
            path: name,
            width: scene.image.width(),
            height: scene.image.height(),
            boxes: scene.boxes,
        });
    }
    let manifest = DatasetManifest::new(entries);
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let saved = match first_err {
        Some(e) => Err(e),
        None => save_manifest(&manifest, &manifest_path).map_err(SynthError::from),
    };
    if let Err(e) = saved {
        for p in written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(SynthOutput { manifest, manifest_path, unplaced })
}
