//! Burns detections into a copy of a frame: a 2-pixel rectangle per box and
//! its score in a 3×5 bitmap font.

use crate::model::{Detection, ImageBuffer};

pub const BORDER: u32 = 2;
const BOX_COLOUR: [u8; 3] = [255, 0, 0];
const TEXT_COLOUR: [u8; 3] = [255, 255, 0];

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// Rows of each glyph, most significant of the low three bits leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn put(img: &mut ImageBuffer, x: i64, y: i64, rgb: [u8; 3]) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    for (c, v) in rgb.into_iter().enumerate() {
        img.set(x as u32, y as u32, c as u8, v);
    }
}

fn draw_text(img: &mut ImageBuffer, text: &str, x: i64, y: i64) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - dx) & 1 == 1 {
                        put(img, cx + dx as i64, y + dy as i64, TEXT_COLOUR);
                    }
                }
            }
        }
        cx += GLYPH_W as i64 + 1;
    }
}

fn to_rgb(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 3 {
        return img.clone();
    }
    let pixels = img.pixels().iter().flat_map(|&v| [v, v, v]).collect();
    ImageBuffer::new(img.width(), img.height(), 3, pixels).expect("same dimensions")
}

/// RGB copy of `img` with every detection outlined just outside its box and
/// labelled with its two-decimal score above it (below when at the top).
pub fn annotate(img: &ImageBuffer, dets: &[Detection]) -> ImageBuffer {
    let mut out = to_rgb(img);
    for d in dets {
        let (x0, y0) = (d.bbox.x() as i64 - BORDER as i64, d.bbox.y() as i64 - BORDER as i64);
        let (x1, y1) = (d.bbox.right() as i64 + BORDER as i64, d.bbox.bottom() as i64 + BORDER as i64);
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = x >= d.bbox.x() as i64
                    && x < d.bbox.right() as i64
                    && y >= d.bbox.y() as i64
                    && y < d.bbox.bottom() as i64;
                if !inside {
                    put(&mut out, x, y, BOX_COLOUR);
                }
            }
        }
        let label = format!("{:.2}", d.score);
        let ty = if y0 - GLYPH_H as i64 - 1 >= 0 { y0 - GLYPH_H as i64 - 1 } else { y1 + 1 };
        draw_text(&mut out, &label, x0, ty);
    }
    out
}
