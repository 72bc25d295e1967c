//! Frame-level orchestration: tile, enhance, detect on a worker pool,
//! project back to image coordinates and merge duplicates.
//!
//! Detection results are a pure function of the frame and the
//! configuration. Workers pull tiles from a shared counter, results are
//! stored by tile index, and everything after collection runs on one thread
//! over a totally ordered list.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectError, Detector, DetectorSpec};
use crate::enhance::{contrast_stretch, EnhanceParams};
use crate::format::fixed6;
use crate::model::{
    iou, rank_order, BBox, DatasetManifest, Detection, ImageBuffer, ImageError,
};
use crate::tiling::{
    extract_patch, plan_tiles, to_image_coords, touches_interior_edge, Tile, TilePlan,
    TilingError, DEFAULT_OVERLAP, DEFAULT_PATCH,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Detector(#[from] DetectError),
    #[error("every one of the {tiles} tiles failed; first error: {first}")]
    AllTilesFailed { tiles: usize, first: DetectError },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed detections document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("detection {index} of {path}: {reason}")]
    InvalidDetection {
        path: String,
        index: usize,
        reason: String,
    },
}

/// Logical CPU count, falling back to one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub patch: u32,
    pub overlap: u32,
    /// Per-patch contrast stretch, off by default: clipping at the upper
    /// percentile flattens targets smaller than the clipped fraction of a
    /// patch into the noise, which defeats the k-sigma baseline.
    pub enhance: Option<EnhanceParams>,
    pub detector: DetectorSpec,
    pub nms_iou: f64,
    pub conf_thresh: f64,
    pub workers: usize,
    /// Drop detections cut off by an interior patch edge when a whole copy
    /// of the same object was found in a neighbouring patch.
    pub suppress_truncated: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            overlap: DEFAULT_OVERLAP,
            enhance: None,
            detector: DetectorSpec::default(),
            nms_iou: 0.5,
            conf_thresh: 0.25,
            workers: default_workers(),
            suppress_truncated: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.overlap >= self.patch {
            return Err(PipelineError::Config(format!(
                "overlap {} must be smaller than patch {}",
                self.overlap, self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(PipelineError::Config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return Err(PipelineError::Config(format!(
                "conf_thresh {} outside [0, 1]",
                self.conf_thresh
            )));
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if let DetectorSpec::Baseline(p) = &self.detector {
            p.validate()?;
        }
        Ok(())
    }
}

/// Wall-clock milliseconds per stage. `tile`, `enhance` and `detect` are
/// summed over tiles (busy time across workers); `total` is elapsed time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTiming {
    pub tile_ms: f64,
    pub enhance_ms: f64,
    pub detect_ms: f64,
    pub merge_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileFailure {
    /// `(col, row)` grid index.
    pub tile: (u32, u32),
    pub error: DetectError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub timing: StageTiming,
    pub tile_count: usize,
    pub failed_tiles: Vec<TileFailure>,
}

/// Translates every tile's detections into image space and orders them by
/// `(score desc, x, y, w, h)`.
pub fn project_all(
    plan: &TilePlan,
    per_tile: &[(Tile, Vec<Detection>)],
) -> Result<Vec<Detection>, TilingError> {
    let mut out = Vec::new();
    for (tile, dets) in per_tile {
        if !tile.extent().fits_in(plan.image_width, plan.image_height) {
            return Err(TilingError::TileOutOfBounds {
                col: tile.col,
                row: tile.row,
                x: tile.origin_x,
                y: tile.origin_y,
                w: tile.width,
                h: tile.height,
                width: plan.image_width,
                height: plan.image_height,
            });
        }
        for d in dets {
            out.push(to_image_coords(tile, d)?);
        }
    }
    out.sort_by(rank_order);
    Ok(out)
}

/// Greedy class-wise non-maximum suppression. A detection is discarded when
/// its IoU with an already accepted detection of the same class exceeds
/// `nms_iou`. Output is ordered by score, ties broken by box.
pub fn nms_merge(dets: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let conflict = kept
            .iter()
            .any(|k| k.class_label == d.class_label && iou(&k.bbox, &d.bbox) > nms_iou);
        if !conflict {
            kept.push(d.clone());
        }
    }
    kept
}

/// Removes truncated detections that are mostly covered (at least half of
/// their area) by a non-truncated detection of the same class.
pub fn suppress_truncated(dets: Vec<(Detection, bool)>) -> Vec<Detection> {
    let whole: Vec<&Detection> = dets.iter().filter(|(_, t)| !t).map(|(d, _)| d).collect();
    let keep: Vec<bool> = dets
        .iter()
        .map(|(d, truncated)| {
            !truncated
                || !whole.iter().any(|w| {
                    w.class_label == d.class_label
                        && 2 * w.bbox.intersection_area(&d.bbox) >= d.bbox.area()
                })
        })
        .collect();
    dets.into_iter()
        .zip(keep)
        .filter_map(|((d, _), k)| k.then_some(d))
        .collect()
}

/// Applies `f` to every item on `workers` threads. Results are returned in
/// item order regardless of which worker ran which item.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(i, &items[i])));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

struct TileOutcome {
    result: Result<Vec<(Detection, bool)>, DetectError>,
    extract: Duration,
    enhance: Duration,
    detect: Duration,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Builds the configured detector and runs one frame through it.
pub fn run_frame(image: &ImageBuffer, cfg: &PipelineConfig) -> Result<FrameResult, PipelineError> {
    cfg.validate()?;
    let detector = cfg.detector.build()?;
    run_frame_with(image, cfg, detector.as_ref())
}

pub fn run_frame_with(
    image: &ImageBuffer,
    cfg: &PipelineConfig,
    detector: &dyn Detector,
) -> Result<FrameResult, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let plan = plan_tiles(image.width(), image.height(), cfg.patch, cfg.overlap)?;
    let plan_time = started.elapsed();

    let outcomes = parallel_map(&plan.tiles, cfg.workers, |_, tile| {
        let t0 = Instant::now();
        let patch = extract_patch(image, tile).expect("planned tiles lie inside the frame");
        let t1 = Instant::now();
        let patch = match &cfg.enhance {
            Some(p) => contrast_stretch(&patch, p),
            None => patch,
        };
        let t2 = Instant::now();
        let result = detector.detect(&patch).map(|dets| {
            dets.into_iter()
                .filter_map(|d| {
                    // enforce the detector contract before projecting
                    let bbox = crate::model::clip_box(&d.bbox, tile.width, tile.height)?;
                    let truncated =
                        touches_interior_edge(tile, &bbox, image.width(), image.height());
                    Some((Detection { bbox, ..d }, truncated))
                })
                .collect()
        });
        TileOutcome {
            result,
            extract: t1 - t0,
            enhance: t2 - t1,
            detect: t2.elapsed(),
        }
    });

    let mut timing = StageTiming {
        tile_ms: ms(plan_time),
        ..Default::default()
    };
    let merge_start = Instant::now();
    let mut failed_tiles = Vec::new();
    let mut flagged = Vec::new();
    for (tile, outcome) in plan.tiles.iter().zip(outcomes) {
        timing.tile_ms += ms(outcome.extract);
        timing.enhance_ms += ms(outcome.enhance);
        timing.detect_ms += ms(outcome.detect);
        match outcome.result {
            Ok(dets) => {
                for (d, truncated) in dets {
                    flagged.push((to_image_coords(tile, &d)?, truncated));
                }
            }
            Err(error) => failed_tiles.push(TileFailure {
                tile: tile.index(),
                error,
            }),
        }
    }
    if !plan.tiles.is_empty() && failed_tiles.len() == plan.tiles.len() {
        return Err(PipelineError::AllTilesFailed {
            tiles: plan.tiles.len(),
            first: failed_tiles.swap_remove(0).error,
        });
    }

    flagged.sort_by(|a, b| rank_order(&a.0, &b.0).then(a.1.cmp(&b.1)));
    let mut candidates = if cfg.suppress_truncated {
        suppress_truncated(flagged)
    } else {
        flagged.into_iter().map(|(d, _)| d).collect()
    };
    candidates.retain(|d| d.score >= cfg.conf_thresh);
    let detections = nms_merge(&candidates, cfg.nms_iou);
    timing.merge_ms = ms(merge_start.elapsed());
    timing.total_ms = ms(started.elapsed());

    Ok(FrameResult {
        detections,
        timing,
        tile_count: plan.tiles.len(),
        failed_tiles,
    })
}

// ---------------------------------------------------------------------------
// Detections document

/// Per-image entry of a detections document.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub path: String,
    pub detections: Vec<Detection>,
    /// Total frame latency; only recorded when timing output is requested,
    /// since it makes the document non-reproducible.
    pub total_ms: Option<u64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionsDocument {
    pub results: Vec<ImageResult>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocWire {
    results: Vec<ResultWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultWire {
    path: String,
    detections: Vec<DetWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timing_ms: Option<TimingWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetWire {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    #[serde(serialize_with = "fixed6")]
    score: f64,
    class: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimingWire {
    total: u64,
}

impl DetectionsDocument {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let doc = DocWire {
            results: self
                .results
                .iter()
                .map(|r| ResultWire {
                    path: r.path.clone(),
                    detections: r
                        .detections
                        .iter()
                        .map(|d| DetWire {
                            x: d.bbox.x(),
                            y: d.bbox.y(),
                            w: d.bbox.w(),
                            h: d.bbox.h(),
                            score: d.score,
                            class: d.class_label.clone(),
                        })
                        .collect(),
                    timing_ms: r.total_ms.map(|total| TimingWire { total }),
                    error: r.error.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&doc).expect("scores are finite");
        out.push(b'\n');
        out
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let doc: DocWire = serde_json::from_slice(bytes)?;
        let mut results = Vec::with_capacity(doc.results.len());
        for r in doc.results {
            let mut detections = Vec::with_capacity(r.detections.len());
            for (index, d) in r.detections.into_iter().enumerate() {
                let invalid = |reason: String| PipelineError::InvalidDetection {
                    path: r.path.clone(),
                    index,
                    reason,
                };
                let bbox = BBox::new(d.x, d.y, d.w, d.h)
                    .ok_or_else(|| invalid(format!("zero-sized box {}x{}", d.w, d.h)))?;
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(invalid(format!("score {} outside [0, 1]", d.score)));
                }
                detections.push(Detection::new(bbox, d.score, d.class));
            }
            results.push(ImageResult {
                path: r.path,
                detections,
                total_ms: r.timing_ms.map(|t| t.total),
                error: r.error,
            });
        }
        Ok(Self { results })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(|source| PipelineError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_json_bytes()).map_err(|source| PipelineError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Outcome of a dataset run, beyond what the document records.
#[derive(Clone, Debug, Default)]
pub struct DatasetRun {
    pub document: DetectionsDocument,
    /// `(image path, failed tiles)` for images with partial coverage.
    pub partial: Vec<(String, Vec<TileFailure>)>,
    /// Images that could not be processed at all.
    pub failed_images: Vec<String>,
    pub frames: Vec<(String, FrameResult)>,
}

/// Runs every manifest image (resolved against `root`) in manifest order and
/// writes the detections document to `out_path`.
pub fn run_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &PipelineConfig,
    out_path: &Path,
    record_timing: bool,
) -> Result<DatasetRun, PipelineError> {
    cfg.validate()?;
    let detector = cfg.detector.build()?;
    let run = run_dataset_with(manifest, root, cfg, detector.as_ref(), record_timing);
    run.document.save(out_path)?;
    Ok(run)
}

pub fn run_dataset_with(
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    record_timing: bool,
) -> DatasetRun {
    let mut run = DatasetRun::default();
    for entry in &manifest.entries {
        let outcome = ImageBuffer::load(&root.join(&entry.path))
            .map_err(|e: ImageError| e.to_string())
            .and_then(|img| run_frame_with(&img, cfg, detector).map_err(|e| e.to_string()));
        match outcome {
            Ok(frame) => {
                if !frame.failed_tiles.is_empty() {
                    run.partial.push((entry.path.clone(), frame.failed_tiles.clone()));
                }
                run.document.results.push(ImageResult {
                    path: entry.path.clone(),
                    detections: frame.detections.clone(),
                    total_ms: record_timing.then(|| frame.timing.total_ms.round() as u64),
                    error: None,
                });
                run.frames.push((entry.path.clone(), frame));
            }
            Err(message) => {
                log::warn!("{}: {message}", entry.path);
                run.failed_images.push(entry.path.clone());
                run.document.results.push(ImageResult {
                    path: entry.path.clone(),
                    detections: Vec::new(),
                    total_ms: None,
                    error: Some(message),
                });
            }
        }
    }
    run
}

// ---------------------------------------------------------------------------
// Latency benchmark

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "at least one sample required");
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        Self {
            median_ms,
            min_ms: s[0],
            max_ms: s[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub workers: usize,
    pub total: LatencyStats,
    /// Median per-stage timings over the repeats.
    pub stages: StageTiming,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub width: u32,
    pub height: u32,
    pub tile_count: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

/// Frame latency budget the benchmark reports against.
pub const LATENCY_BUDGET_MS: f64 = 8000.0;

impl BenchReport {
    /// Median latency of the single-worker row over the median of the row
    /// for `workers`, when both were measured.
    pub fn speedup(&self, workers: usize) -> Option<f64> {
        let base = self.rows.iter().find(|r| r.workers == 1)?;
        let row = self.rows.iter().find(|r| r.workers == workers)?;
        Some(base.total.median_ms / row.total.median_ms)
    }

    /// The row with the most workers.
    pub fn widest(&self) -> Option<&BenchRow> {
        self.rows.iter().max_by_key(|r| r.workers)
    }

    pub fn within_budget(&self) -> bool {
        self.widest()
            .is_some_and(|r| r.total.median_ms < LATENCY_BUDGET_MS)
    }
}

/// Times `repeats` runs of the frame for each worker count in the sweep.
pub fn bench(
    image: &ImageBuffer,
    cfg: &PipelineConfig,
    repeats: usize,
    workers_sweep: &[usize],
) -> Result<BenchReport, PipelineError> {
    if repeats == 0 {
        return Err(PipelineError::Config("repeats must be at least 1".into()));
    }
    let sweep: Vec<usize> = if workers_sweep.is_empty() {
        vec![cfg.workers]
    } else {
        workers_sweep.to_vec()
    };
    cfg.validate()?;
    let detector = cfg.detector.build()?;
    let mut rows = Vec::with_capacity(sweep.len());
    let mut tile_count = 0;
    for &workers in &sweep {
        let run_cfg = PipelineConfig {
            workers,
            ..cfg.clone()
        };
        let mut totals = Vec::with_capacity(repeats);
        let mut stages = Vec::with_capacity(repeats);
        let mut detections = Vec::new();
        for _ in 0..repeats {
            let frame = run_frame_with(image, &run_cfg, detector.as_ref())?;
            totals.push(frame.timing.total_ms);
            stages.push(frame.timing);
            tile_count = frame.tile_count;
            detections = frame.detections;
        }
        let med = |f: fn(&StageTiming) -> f64| {
            LatencyStats::from_samples(&stages.iter().map(f).collect::<Vec<_>>()).median_ms
        };
        rows.push(BenchRow {
            workers,
            total: LatencyStats::from_samples(&totals),
            stages: StageTiming {
                tile_ms: med(|s| s.tile_ms),
                enhance_ms: med(|s| s.enhance_ms),
                detect_ms: med(|s| s.detect_ms),
                merge_ms: med(|s| s.merge_ms),
                total_ms: med(|s| s.total_ms),
            },
            detections,
        });
    }
    Ok(BenchReport {
        width: image.width(),
        height: image.height(),
        tile_count,
        repeats,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BaselineParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: u32, y: u32, w: u32, h: u32, score: f64) -> Detection {
        Detection::new(BBox::new(x, y, w, h).unwrap(), score, "person")
    }

    fn cfg(workers: usize) -> PipelineConfig {
        PipelineConfig {
            workers,
            ..Default::default()
        }
    }

    fn frame_with_block(w: u32, h: u32, bx: u32, by: u32, side: u32) -> ImageBuffer {
        ImageBuffer::from_fn_gray(w, h, |x, y| {
            if (bx..bx + side).contains(&x) && (by..by + side).contains(&y) {
                220
            } else {
                30
            }
        })
        .unwrap()
    }

    #[test]
    fn project_examples() {
        let plan = plan_tiles(400, 400, 200, 50).unwrap();
        assert!(project_all(&plan, &[]).unwrap().is_empty());
        let tile = *plan
            .tiles
            .iter()
            .find(|t| (t.origin_x, t.origin_y) == (150, 200))
            .unwrap();
        let out = project_all(&plan, &[(tile, vec![det(10, 20, 30, 40, 0.7)])]).unwrap();
        assert_eq!(out, vec![det(160, 220, 30, 40, 0.7)]);
    }

    #[test]
    fn project_is_order_independent() {
        let plan = plan_tiles(400, 400, 200, 50).unwrap();
        let per_tile: Vec<_> = plan
            .tiles
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, vec![det(i as u32, 3, 5, 5, 0.1 * (i % 4) as f64)]))
            .collect();
        let mut shuffled = per_tile.clone();
        shuffled.reverse();
        shuffled.swap(0, 4);
        assert_eq!(project_all(&plan, &per_tile).unwrap(), project_all(&plan, &shuffled).unwrap());
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms_merge(&[det(1, 1, 5, 5, 0.4)], 0.5), vec![det(1, 1, 5, 5, 0.4)]);
        let dup = [det(0, 0, 10, 10, 0.8), det(0, 0, 10, 10, 0.9)];
        assert_eq!(nms_merge(&dup, 0.5), vec![det(0, 0, 10, 10, 0.9)]);
        let pair = [det(0, 0, 10, 10, 0.9), det(5, 0, 10, 10, 0.8)];
        assert_eq!(nms_merge(&pair, 0.5).len(), 2);
        assert_eq!(nms_merge(&pair, 0.3), vec![det(0, 0, 10, 10, 0.9)]);
    }

    #[test]
    fn nms_is_class_wise() {
        let a = det(0, 0, 10, 10, 0.9);
        let b = Detection::new(BBox::new(0, 0, 10, 10).unwrap(), 0.8, "boat");
        assert_eq!(nms_merge(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn truncated_copies_are_dropped_only_when_covered() {
        let whole = det(190, 190, 20, 20, 0.8);
        let part = det(190, 190, 10, 10, 0.8);
        let lone = det(500, 500, 10, 4, 0.8);
        let out = suppress_truncated(vec![(whole.clone(), false), (part, true), (lone.clone(), true)]);
        assert_eq!(out, vec![whole, lone]);
    }

    #[test]
    fn blank_frame_has_no_detections() {
        let img = ImageBuffer::filled(400, 400, 1, 0).unwrap();
        let r = run_frame(&img, &cfg(2)).unwrap();
        assert!(r.detections.is_empty());
        assert_eq!(r.tile_count, 9);
        assert!(r.failed_tiles.is_empty());
    }

    #[test]
    fn block_straddling_tiles_is_reported_once() {
        let img = frame_with_block(400, 400, 190, 190, 20);
        let r = run_frame(&img, &cfg(3)).unwrap();
        assert_eq!(r.detections.len(), 1, "{:?}", r.detections);
        assert_eq!(r.detections[0].bbox, BBox::new(190, 190, 20, 20).unwrap());
        // without suppression the tile-cut fragments survive NMS
        let raw = run_frame(&img, &PipelineConfig { suppress_truncated: false, ..cfg(1) }).unwrap();
        assert!(raw.detections.len() > 1);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let img = ImageBuffer::filled(10, 10, 1, 0).unwrap();
        for bad in [
            PipelineConfig { overlap: 200, ..cfg(1) },
            PipelineConfig { nms_iou: 1.5, ..cfg(1) },
            PipelineConfig { workers: 0, ..cfg(1) },
            PipelineConfig {
                detector: DetectorSpec::Baseline(BaselineParams { min_side: 0, ..Default::default() }),
                ..cfg(1)
            },
        ] {
            assert!(run_frame(&img, &bad).is_err());
        }
    }

    struct FailingDetector;
    impl Detector for FailingDetector {
        fn detect(&self, _: &ImageBuffer) -> Result<Vec<Detection>, DetectError> {
            Err(DetectError::Io("nope".into()))
        }
    }

    struct FailOnTopRow;
    impl Detector for FailOnTopRow {
        fn detect(&self, patch: &ImageBuffer) -> Result<Vec<Detection>, DetectError> {
            if patch.get(0, 0, 0) == 1 {
                Err(DetectError::Io("top row".into()))
            } else {
                Ok(vec![])
            }
        }
    }

    #[test]
    fn tile_failures_degrade_gracefully() {
        let img = ImageBuffer::from_fn_gray(400, 400, |_, y| (y < 100) as u8).unwrap();
        let c = PipelineConfig { enhance: None, ..cfg(2) };
        let r = run_frame_with(&img, &c, &FailOnTopRow).unwrap();
        assert_eq!(r.failed_tiles.len(), 3);
        assert!(r.failed_tiles.iter().all(|f| f.tile.1 == 0));
        assert!(matches!(
            run_frame_with(&img, &c, &FailingDetector),
            Err(PipelineError::AllTilesFailed { tiles: 9, .. })
        ));
    }

    #[test]
    fn detections_document_format() {
        let doc = DetectionsDocument {
            results: vec![ImageResult {
                path: "rel/img.png".into(),
                detections: vec![det(1, 2, 3, 4, 0.8732141)],
                total_ms: Some(412),
                error: None,
            }],
        };
        let text = String::from_utf8(doc.to_json_bytes()).unwrap();
        assert_eq!(
            text,
            "{\"results\":[{\"path\":\"rel/img.png\",\"detections\":[{\"x\":1,\"y\":2,\"w\":3,\"h\":4,\
             \"score\":0.873214,\"class\":\"person\"}],\"timing_ms\":{\"total\":412}}]}\n"
        );
        let back = DetectionsDocument::from_json_bytes(text.as_bytes()).unwrap();
        assert_eq!(back.results[0].detections[0].score, 0.873214);
        assert_eq!(back.to_json_bytes(), text.as_bytes());
        assert!(DetectionsDocument::from_json_bytes(
            br#"{"results":[{"path":"a","detections":[{"x":0,"y":0,"w":0,"h":1,"score":0.5,"class":"p"}]}]}"#
        )
        .is_err());
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_samples(&[3.0]);
        assert_eq!((s.min_ms, s.median_ms, s.max_ms), (3.0, 3.0, 3.0));
        let s = LatencyStats::from_samples(&[5.0, 1.0, 3.0, 10.0]);
        assert_eq!((s.min_ms, s.median_ms, s.max_ms), (1.0, 4.0, 10.0));
    }

    #[test]
    fn bench_single_repeat() {
        let img = frame_with_block(400, 400, 40, 40, 10);
        let r = bench(&img, &cfg(1), 1, &[1, 2]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.tile_count, 9);
        assert_eq!(r.rows[0].detections, r.rows[1].detections);
        let t = &r.rows[0].total;
        assert!(t.min_ms == t.max_ms && t.max_ms == t.median_ms);
        assert!(r.speedup(2).is_some());
        assert!(bench(&img, &cfg(1), 0, &[1]).is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        for workers in [1, 3, 16] {
            let out = parallel_map(&items, workers, |i, v| (i as u32) * 1000 + v);
            assert_eq!(out, (0..100).map(|v| v * 1001).collect::<Vec<_>>());
        }
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (0u32..60, 0u32..60, 1u32..25, 1u32..25, 0u32..=20, 0usize..2),
            0..25,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s, c)| {
                    Detection::new(BBox::new(x, y, w, h).unwrap(), s as f64 / 20.0, ["person", "boat"][c])
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_and_conflict_free(dets in arb_dets(), thr in 0.0f64..=1.0) {
            let once = nms_merge(&dets, thr);
            prop_assert_eq!(&nms_merge(&once, thr), &once);
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(a.class_label != b.class_label || iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn raising_conf_thresh_only_removes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut img = ImageBuffer::from_fn_gray(500, 420, |_, _| rng.random_range(20..40)).unwrap();
            for _ in 0..8 {
                let (x, y, s) = (rng.random_range(0..480), rng.random_range(0..400), rng.random_range(5..20));
                let v = rng.random_range(60..255);
                for py in y..(y + s).min(420) {
                    for px in x..(x + s).min(500) {
                        img.set(px, py, 0, v);
                    }
                }
            }
            let mut prev: Option<Vec<Detection>> = None;
            for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
                let r = run_frame(&img, &PipelineConfig { conf_thresh: t, ..cfg(2) }).unwrap();
                for d in &r.detections {
                    assert!(d.bbox.fits_in(500, 420));
                    if let Some(p) = &prev {
                        assert!(p.contains(d));
                    }
                }
                prev = Some(r.detections);
            }
        }
    }
}
