//! Overlapping patch grid over a frame, and the mapping between patch-local
//! and image coordinates.
//!
//! Along an axis of length `L` the tile origins are `0, s, 2s, ...` with
//! stride `s = patch - overlap`, followed by one origin clamped to
//! `L - patch` when the last regular tile stops short of the edge. Frames
//! no larger than the patch along an axis get a single tile of size `L`.

use thiserror::Error;

use crate::model::{BBox, Detection, ImageBuffer};

pub const DEFAULT_PATCH: u32 = 200;
/// Equal to the largest expected target side, so every target appears whole
/// in at least one tile.
pub const DEFAULT_OVERLAP: u32 = 50;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TilingError {
    #[error("overlap {overlap} must be smaller than patch {patch}")]
    OverlapTooLarge { patch: u32, overlap: u32 },
    #[error("frame dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("tile ({col},{row}) at ({x},{y}) size {w}x{h} lies outside the {width}x{height} image")]
    TileOutOfBounds {
        col: u32,
        row: u32,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("box {bbox:?} lies outside the {w}x{h} patch of tile ({col},{row})")]
    BoxOutsideTile {
        bbox: BBox,
        col: u32,
        row: u32,
        w: u32,
        h: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tile {
    pub col: u32,
    pub row: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
}

impl Tile {
    pub fn index(&self) -> (u32, u32) {
        (self.col, self.row)
    }

    /// The tile's footprint in image coordinates.
    pub fn extent(&self) -> BBox {
        BBox::new(self.origin_x, self.origin_y, self.width, self.height)
            .expect("tiles are never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub image_width: u32,
    pub image_height: u32,
    pub patch: u32,
    pub overlap: u32,
    /// Row-major by `(row, col)`.
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn columns(&self) -> usize {
        self.tiles.iter().take_while(|t| t.row == 0).count()
    }

    pub fn rows(&self) -> usize {
        self.tiles.last().map_or(0, |t| t.row as usize + 1)
    }
}

/// Tile origins along one axis. `patch` must exceed `overlap`.
pub fn axis_origins(len: u32, patch: u32, overlap: u32) -> Vec<u32> {
    if len <= patch {
        return vec![0];
    }
    let stride = patch - overlap;
    let regular = (len - patch) / stride + 1;
    let mut origins: Vec<u32> = (0..regular).map(|k| k * stride).collect();
    let last = (regular - 1) * stride;
    if last + patch < len {
        origins.push(len - patch);
    }
    origins
}

pub fn plan_tiles(width: u32, height: u32, patch: u32, overlap: u32) -> Result<TilePlan, TilingError> {
    if overlap >= patch {
        return Err(TilingError::OverlapTooLarge { patch, overlap });
    }
    if width == 0 || height == 0 {
        return Err(TilingError::ZeroDimension { width, height });
    }
    let xs = axis_origins(width, patch, overlap);
    let ys = axis_origins(height, patch, overlap);
    let tile_w = patch.min(width);
    let tile_h = patch.min(height);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &origin_y) in ys.iter().enumerate() {
        for (col, &origin_x) in xs.iter().enumerate() {
            tiles.push(Tile {
                col: col as u32,
                row: row as u32,
                origin_x,
                origin_y,
                width: tile_w,
                height: tile_h,
            });
        }
    }
    Ok(TilePlan {
        image_width: width,
        image_height: height,
        patch,
        overlap,
        tiles,
    })
}

/// Copies the tile's sub-rectangle out of `image`.
pub fn extract_patch(image: &ImageBuffer, tile: &Tile) -> Result<ImageBuffer, TilingError> {
    if tile.width == 0
        || tile.height == 0
        || !tile.extent().fits_in(image.width(), image.height())
    {
        return Err(TilingError::TileOutOfBounds {
            col: tile.col,
            row: tile.row,
            x: tile.origin_x,
            y: tile.origin_y,
            w: tile.width,
            h: tile.height,
            width: image.width(),
            height: image.height(),
        });
    }
    let channels = image.channels() as usize;
    let row_len = tile.width as usize * channels;
    let mut pixels = Vec::with_capacity(row_len * tile.height as usize);
    for y in tile.origin_y..tile.origin_y + tile.height {
        let start = image.index(tile.origin_x, y, 0);
        pixels.extend_from_slice(&image.pixels()[start..start + row_len]);
    }
    Ok(ImageBuffer::new(tile.width, tile.height, image.channels(), pixels)
        .expect("tile dimensions are non-zero"))
}

/// Translates a patch-local detection into image coordinates.
pub fn to_image_coords(tile: &Tile, det: &Detection) -> Result<Detection, TilingError> {
    if !det.bbox.fits_in(tile.width, tile.height) {
        return Err(TilingError::BoxOutsideTile {
            bbox: det.bbox,
            col: tile.col,
            row: tile.row,
            w: tile.width,
            h: tile.height,
        });
    }
    Ok(Detection {
        bbox: det.bbox.translate(tile.origin_x, tile.origin_y),
        score: det.score,
        class_label: det.class_label.clone(),
    })
}

/// True when a patch-local box touches a patch edge that lies inside the
/// frame, i.e. the object may continue into a neighbouring tile.
pub fn touches_interior_edge(tile: &Tile, bbox: &BBox, image_width: u32, image_height: u32) -> bool {
    let left = bbox.x() == 0 && tile.origin_x > 0;
    let top = bbox.y() == 0 && tile.origin_y > 0;
    let right = bbox.right() == tile.width as u64 && tile.origin_x + tile.width < image_width;
    let bottom = bbox.bottom() == tile.height as u64 && tile.origin_y + tile.height < image_height;
    left || top || right || bottom
}
