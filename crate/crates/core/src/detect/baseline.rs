//! Deterministic small-target detector: mean-relative thresholding followed
//! by 8-connected component labelling and a size band.

use crate::model::{rank_order, BBox, Detection, ImageBuffer, DEFAULT_CLASS};

use super::{DetectError, Detector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineParams {
    /// Pixels deviating from the patch mean by more than `k_sigma` standard
    /// deviations are foreground.
    pub k_sigma: f64,
    pub min_side: u32,
    pub max_side: u32,
    pub conf_floor: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            k_sigma: 3.5,
            min_side: 5,
            max_side: 50,
            conf_floor: 0.1,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.k_sigma.is_finite() && self.k_sigma >= 0.0) {
            return Err(DetectError::Params(format!("k_sigma {} must be >= 0", self.k_sigma)));
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(DetectError::Params(format!(
                "side band [{}, {}] must satisfy 0 < min <= max",
                self.min_side, self.max_side
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_floor) {
            return Err(DetectError::Params(format!(
                "conf_floor {} outside [0, 1]",
                self.conf_floor
            )));
        }
        Ok(())
    }
}

/// A connected foreground region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub bbox: BBox,
    pub pixels: usize,
}

/// 8-connected labelling of a row-major boolean mask. Components are
/// returned in raster order of their first pixel.
pub fn label_components(mask: &[bool], width: u32, height: u32) -> Vec<Component> {
    label_with(mask, width, height)
        .into_iter()
        .map(|(c, _)| c)
        .collect()
}

// Flood fill with an explicit stack; also returns each component's member
// pixel indices.
fn label_with(mask: &[bool], width: u32, height: u32) -> Vec<(Component, Vec<usize>)> {
    let (w, h) = (width as i64, height as i64);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let bbox = BBox::from_corners(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1)
            .expect("component has at least one pixel");
        out.push((
            Component {
                bbox,
                pixels: members.len(),
            },
            members,
        ));
    }
    out
}

/// Runs the anomaly detector on one patch (RGB is converted to luma).
///
/// Statistics are kept in exact integer form, so the foreground mask is
/// unchanged by adding a constant to every pixel.
pub fn baseline_detect(patch: &ImageBuffer, params: &BaselineParams) -> Vec<Detection> {
    let gray = patch.to_luma();
    let values = gray.pixels();
    let n = values.len() as u128;
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    let sum_sq: u128 = values.iter().map(|&v| (v as u128) * (v as u128)).sum();
    // n² · variance
    let spread = n * sum_sq - sum * sum;
    if spread == 0 {
        return Vec::new();
    }
    // |v - mean| > k·s  <=>  |v·n - sum| > k·sqrt(n² · variance)
    let limit = params.k_sigma * (spread as f64).sqrt();
    let scaled_dev = |v: u8| (v as i128 * n as i128 - sum as i128).unsigned_abs();
    let mask: Vec<bool> = values.iter().map(|&v| scaled_dev(v) as f64 > limit).collect();

    let mean = sum as f64 / n as f64;
    let mut dets: Vec<Detection> = label_with(&mask, gray.width(), gray.height())
        .into_iter()
        .filter(|(c, _)| {
            let (bw, bh) = (c.bbox.w(), c.bbox.h());
            (params.min_side..=params.max_side).contains(&bw)
                && (params.min_side..=params.max_side).contains(&bh)
        })
        .map(|(c, members)| {
            let max_dev = members.iter().map(|&i| scaled_dev(values[i])).max().unwrap_or(0);
            let dev = max_dev as f64 / n as f64;
            let score = (dev / (255.0 - mean)).min(1.0).max(params.conf_floor);
            Detection::new(c.bbox, score, DEFAULT_CLASS)
        })
        .collect();
    dets.sort_by(rank_order);
    dets
}

#[derive(Clone, Debug)]
pub struct BaselineDetector {
    params: BaselineParams,
}

impl BaselineDetector {
    pub fn new(params: BaselineParams) -> Result<Self, DetectError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &BaselineParams {
        &self.params
    }
}

impl Detector for BaselineDetector {
    fn detect(&self, patch: &ImageBuffer) -> Result<Vec<Detection>, DetectError> {
        Ok(baseline_detect(patch, &self.params))
    }
}
