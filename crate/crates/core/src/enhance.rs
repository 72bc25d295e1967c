//! Per-patch contrast stretching and the edge-preserving selective Gaussian
//! blur applied to synthetic frames.

use thiserror::Error;

use crate::model::ImageBuffer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnhanceError {
    #[error("percentiles must satisfy 0 <= low < high <= 100, got {low} and {high}")]
    Percentiles { low: f64, high: f64 },
    #[error("blur radius must be at least 1")]
    Radius,
}

/// Percentile bounds for the linear stretch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceParams {
    p_low: f64,
    p_high: f64,
}

impl EnhanceParams {
    pub fn new(p_low: f64, p_high: f64) -> Result<Self, EnhanceError> {
        if !(0.0..100.0).contains(&p_low) || !(p_high > p_low && p_high <= 100.0) {
            return Err(EnhanceError::Percentiles {
                low: p_low,
                high: p_high,
            });
        }
        Ok(Self { p_low, p_high })
    }

    pub fn p_low(&self) -> f64 {
        self.p_low
    }

    pub fn p_high(&self) -> f64 {
        self.p_high
    }
}

impl Default for EnhanceParams {
    fn default() -> Self {
        Self {
            p_low: 2.0,
            p_high: 98.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlurParams {
    radius: u32,
    max_delta: u8,
}

impl BlurParams {
    pub fn new(radius: u32, max_delta: u8) -> Result<Self, EnhanceError> {
        if radius == 0 {
            return Err(EnhanceError::Radius);
        }
        Ok(Self { radius, max_delta })
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn max_delta(&self) -> u8 {
        self.max_delta
    }

    /// Gaussian width, fixed at half the radius.
    pub fn sigma(&self) -> f64 {
        self.radius as f64 / 2.0
    }
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            radius: 5,
            max_delta: 50,
        }
    }
}

/// Value at percentile `p` of a 256-bin histogram holding `total` samples,
/// where rank `round(p / 100 * (total - 1))` indexes the sorted samples.
fn histogram_percentile(hist: &[u32; 256], total: usize, p: f64) -> u8 {
    let rank = (p / 100.0 * (total - 1) as f64).round() as usize;
    let mut seen = 0usize;
    for (value, &count) in hist.iter().enumerate() {
        seen += count as usize;
        if seen > rank {
            return value as u8;
        }
    }
    255
}

/// Linear percentile stretch applied independently to each channel:
/// `v' = clamp(round(255 (v - lo) / (hi - lo)), 0, 255)`. A channel whose
/// percentiles coincide is left untouched.
pub fn contrast_stretch(img: &ImageBuffer, params: &EnhanceParams) -> ImageBuffer {
    let channels = img.channels() as usize;
    let total = img.width() as usize * img.height() as usize;
    let mut out = img.clone();
    for c in 0..channels {
        let mut hist = [0u32; 256];
        for px in img.pixels().chunks_exact(channels) {
            hist[px[c] as usize] += 1;
        }
        let lo = histogram_percentile(&hist, total, params.p_low);
        let hi = histogram_percentile(&hist, total, params.p_high);
        if hi == lo {
            continue;
        }
        let span = (hi as f64) - (lo as f64);
        let lut: Vec<u8> = (0..=255u8)
            .map(|v| (255.0 * (v as f64 - lo as f64) / span).round().clamp(0.0, 255.0) as u8)
            .collect();
        for px in out.pixels_mut().chunks_exact_mut(channels) {
            px[c] = lut[px[c] as usize];
        }
    }
    out
}

/// Fixed-point scale for the Gaussian weights.
const WEIGHT_ONE: f64 = 65536.0;

trait Acc: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + From<u32> + Into<u64> {}
impl Acc for u32 {}
impl Acc for u64 {}

/// Blurs one channel plane. Each kernel offset is applied to a whole output
/// row at once so the inner loop runs over contiguous pixels.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn blur_plane<T: Acc>(plane: &[u8], w: usize, h: usize, r: usize, weights: &[u32], delta: i16, out: &mut [u8], ch: usize, c: usize) {
    let side = 2 * r + 1;
    let mut num = vec![T::default(); w];
    let mut den = vec![T::default(); w];
    for y in 0..h {
        num.fill(T::default());
        den.fill(T::default());
        let centre = &plane[y * w..(y + 1) * w];
        for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            let src_row = &plane[qy * w..(qy + 1) * w];
            let wrow = &weights[(qy + r - y) * side..][..side];
            for (k, &wt) in wrow.iter().enumerate() {
                // neighbour column is x + k - r
                let (xs, xe) = (r.saturating_sub(k), (w + r).saturating_sub(k).min(w));
                if xs >= xe {
                    continue;
                }
                let src = &src_row[xs + k - r..xe + k - r];
                for (((&v, &cv), n), d) in src
                    .iter()
                    .zip(&centre[xs..xe])
                    .zip(&mut num[xs..xe])
                    .zip(&mut den[xs..xe])
                {
                    let keep = 0u32.wrapping_sub(((v as i16 - cv as i16).unsigned_abs() <= delta as u16) as u32);
                    let wt = T::from(wt & keep);
                    *n += wt * T::from(v as u32);
                    *d += wt;
                }
            }
        }
        for x in 0..w {
            let (n, d): (u64, u64) = (num[x].into(), den[x].into());
            // round half away from zero on a positive quotient
            out[(y * w + x) * ch + c] = ((2 * n + d) / (2 * d)) as u8;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn blur_plane_u32(plane: &[u8], w: usize, h: usize, r: usize, weights: &[u32], delta: i16, out: &mut [u8], ch: usize, c: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        #[target_feature(enable = "avx2")]
        #[allow(clippy::too_many_arguments)]
        unsafe fn wide(plane: &[u8], w: usize, h: usize, r: usize, weights: &[u32], delta: i16, out: &mut [u8], ch: usize, c: usize) {
            blur_plane::<u32>(plane, w, h, r, weights, delta, out, ch, c)
        }
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { wide(plane, w, h, r, weights, delta, out, ch, c) };
        return;
    }
    blur_plane::<u32>(plane, w, h, r, weights, delta, out, ch, c)
}

/// Gaussian-weighted mean over the `(2r+1)²` window, restricted to neighbours
/// whose value lies within `max_delta` of the centre pixel (per channel).
/// The window is truncated at the frame border; the centre always
/// participates.
pub fn selective_gaussian_blur(img: &ImageBuffer, params: &BlurParams) -> ImageBuffer {
    let r = params.radius as i64;
    let two_sigma_sq = 2.0 * params.sigma() * params.sigma();
    let weights: Vec<u32> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| {
            let d2 = (dx * dx + dy * dy) as f64;
            ((-d2 / two_sigma_sq).exp() * WEIGHT_ONE).round() as u32
        })
        .collect();

    let (w, h) = (img.width() as usize, img.height() as usize);
    let ch = img.channels() as usize;
    let r = r as usize;
    let delta = params.max_delta as i16;
    let mut out = vec![0u8; img.pixels().len()];
    let mut plane = vec![0u8; w * h];
    // weight total can exceed u32 only for large radii
    let total: u64 = weights.iter().map(|&x| x as u64).sum::<u64>() * 255;
    for c in 0..ch {
        for (dst, px) in plane.iter_mut().zip(img.pixels().chunks_exact(ch)) {
            *dst = px[c];
        }
        if total <= u32::MAX as u64 {
            blur_plane_u32(&plane, w, h, r, &weights, delta, &mut out, ch, c);
        } else {
            blur_plane::<u64>(&plane, w, h, r, &weights, delta, &mut out, ch, c);
        }
    }
    ImageBuffer::new(img.width(), img.height(), img.channels(), out)
        .expect("output has the input's shape")
}
