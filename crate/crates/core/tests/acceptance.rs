//! End-to-end acceptance run. Every criterion runs in sequence inside one
//! test so timing-sensitive checks do not compete with each other, and each
//! prints one PASS/FAIL line.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sartile::augment::{hflip, rot90, vflip};
use sartile::cli::bench_frame;
use sartile::enhance::{selective_gaussian_blur, BlurParams};
use sartile::eval::{average_precision, evaluate, ImageDetection};
use sartile::pipeline::{bench, nms_merge, run_dataset, run_frame, PipelineConfig};
use sartile::synth::{compose_scene, generate_dataset, scene_rng, SceneAssets, SynthConfig};
use sartile::tiling::plan_tiles;
use sartile::{BBox, Detection, GroundTruthBox, ImageBuffer};

/// Written straight to the stdout handle so the lines survive test output
/// capture.
fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Outcome {
    pass: bool,
    /// Failures that only count on hardware the criterion is stated for.
    hardware_bound: bool,
}

fn report(n: u32, name: &str, pass: bool, detail: String) -> Outcome {
    emit(format!("criterion {n} {name}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
    Outcome { pass, hardware_bound: false }
}

// ---------------------------------------------------------------------------
// 1. tiling

/// Tiles as half-open rectangles `(x0, y0, x1, y1)`.
fn tile_rects(w: u32, h: u32) -> Vec<(u32, u32, u32, u32)> {
    let plan = plan_tiles(w, h, 200, 50).unwrap();
    plan.tiles
        .iter()
        .map(|t| (t.origin_x, t.origin_y, t.origin_x + t.width, t.origin_y + t.height))
        .collect()
}

/// Coverage by painting every tile into a 2D difference array.
fn covered_2d(w: u32, h: u32, tiles: &[(u32, u32, u32, u32)]) -> bool {
    let (w, h) = (w as usize, h as usize);
    let mut diff = vec![0i32; (w + 1) * (h + 1)];
    for &(x0, y0, x1, y1) in tiles {
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1.min(w as u32) as usize, y1.min(h as u32) as usize);
        diff[y0 * (w + 1) + x0] += 1;
        diff[y0 * (w + 1) + x1] -= 1;
        diff[y1 * (w + 1) + x0] -= 1;
        diff[y1 * (w + 1) + x1] += 1;
    }
    let mut row_acc = vec![0i32; w + 1];
    for y in 0..h {
        let mut run = 0;
        for x in 0..w {
            run += diff[y * (w + 1) + x];
            row_acc[x] += run;
            if row_acc[x] <= 0 {
                return false;
            }
        }
    }
    true
}

/// The tile set is the product of its distinct column and row spans.
fn is_grid(tiles: &[(u32, u32, u32, u32)]) -> bool {
    let mut cols: Vec<(u32, u32)> = tiles.iter().map(|t| (t.0, t.2)).collect();
    let mut rows: Vec<(u32, u32)> = tiles.iter().map(|t| (t.1, t.3)).collect();
    cols.sort_unstable();
    cols.dedup();
    rows.sort_unstable();
    rows.dedup();
    if cols.len() * rows.len() != tiles.len() {
        return false;
    }
    let mut set: Vec<_> = tiles.to_vec();
    set.sort_unstable();
    set.dedup();
    set.len() == tiles.len()
        && rows.iter().all(|r| cols.iter().all(|c| set.binary_search(&(c.0, r.0, c.1, r.1)).is_ok()))
}

/// Every interval of length ≤ 50 inside `[0, len)` lies within one span.
fn axis_contains_all(len: u32, spans: &[(u32, u32)]) -> bool {
    (0..len).all(|a| {
        let s = 50.min(len - a);
        spans.iter().any(|&(lo, hi)| lo <= a && a + s <= hi)
    })
}

fn axis_spans(tiles: &[(u32, u32, u32, u32)], horizontal: bool) -> Vec<(u32, u32)> {
    let mut v: Vec<(u32, u32)> = tiles.iter().map(|t| if horizontal { (t.0, t.2) } else { (t.1, t.3) }).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Every origin's largest box (sides up to 50, clipped at the frame) fits
/// one tile; any smaller box at that origin then fits too.
fn contains_2d_brute(w: u32, h: u32, tiles: &[(u32, u32, u32, u32)]) -> bool {
    (0..h).all(|y| {
        (0..w).all(|x| {
            let (x1, y1) = (x + 50.min(w - x), y + 50.min(h - y));
            tiles.iter().any(|&(tx0, ty0, tx1, ty1)| tx0 <= x && ty0 <= y && x1 <= tx1 && y1 <= ty1)
        })
    })
}

fn criterion_tiling() -> Outcome {
    let start = Instant::now();
    let mut violations = Vec::new();
    for w in 1..=300 {
        for h in 1..=300 {
            let tiles = tile_rects(w, h);
            if !is_grid(&tiles) || !covered_2d(w, h, &tiles) {
                violations.push((w, h));
            }
        }
    }
    // per-axis containment, which with the grid check settles 2D containment
    for len in 1..=1000 {
        let tiles = tile_rects(len, 1);
        if !axis_contains_all(len, &axis_spans(&tiles, true)) || !covered_2d(len, 1, &tiles) {
            violations.push((len, 1));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sampled: Vec<(u32, u32)> = (0..400).map(|_| (rng.random_range(1..=1000), rng.random_range(1..=1000))).collect();
    for edge in [1, 199, 200, 201, 349, 350, 351, 499, 500, 501, 999, 1000] {
        sampled.push((edge, 1000));
        sampled.push((1000, edge));
        sampled.push((edge, edge));
    }
    for &(w, h) in &sampled {
        let tiles = tile_rects(w, h);
        let ok = is_grid(&tiles)
            && covered_2d(w, h, &tiles)
            && axis_contains_all(w, &axis_spans(&tiles, true))
            && axis_contains_all(h, &axis_spans(&tiles, false));
        if !ok {
            violations.push((w, h));
        }
    }
    for &(w, h) in sampled.iter().step_by(40) {
        if !contains_2d_brute(w, h, &tile_rects(w, h)) {
            violations.push((w, h));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "tiling coverage & containment",
        violations.is_empty() && secs < 60.0,
        format!("violations={} first={:?} runtime={secs:.1}s", violations.len(), violations.first()),
    )
}

// ---------------------------------------------------------------------------
// 2 and 3. average precision

fn oracle_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let ix = (a.0 + a.2).min(b.0 + b.2).saturating_sub(a.0.max(b.0)) as f64;
    let iy = (a.1 + a.3).min(b.1 + b.3).saturating_sub(a.1.max(b.1)) as f64;
    let inter = ix * iy;
    inter / ((a.2 * a.3) as f64 + (b.2 * b.3) as f64 - inter)
}

type RawDet = (usize, f64, (u32, u32, u32, u32));

/// Independent sweep: rank detections, match greedily per image, then sum
/// `(1/G) · max precision at or after rank k` over true positives.
fn oracle_ap(dets: &[RawDet], gts: &[(usize, (u32, u32, u32, u32))], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.1.partial_cmp(&da.1).unwrap().then(da.0.cmp(&db.0)).then(da.2.cmp(&db.2)).then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &i in &order {
        let (img, _, b) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gimg, gb)) in gts.iter().enumerate() {
            if gimg != img || claimed[g] {
                continue;
            }
            let v = oracle_iou(b, gb);
            if best.is_none() || v > best.unwrap().1 {
                best = Some((g, v));
            }
        }
        let hit = matches!(best, Some((_, v)) if v >= thr && v > 0.0);
        if hit {
            claimed[best.unwrap().0] = true;
        }
        tp_flags.push(hit);
    }
    let precision: Vec<f64> = (0..tp_flags.len())
        .map(|k| tp_flags[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..tp_flags.len() {
        if tp_flags[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / gts.len() as f64;
        }
    }
    ap
}

fn random_box(rng: &mut ChaCha8Rng) -> (u32, u32, u32, u32) {
    (rng.random_range(0..20), rng.random_range(0..20), rng.random_range(1..10), rng.random_range(1..10))
}

fn criterion_ap_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let images = rng.random_range(1..=3);
        let n_det = rng.random_range(0..=10);
        let n_gt = rng.random_range(0..=5);
        let dets: Vec<RawDet> = (0..n_det)
            .map(|_| {
                // coarse scores so ties are exercised
                let score = rng.random_range(0..=8) as f64 / 8.0;
                (rng.random_range(0..images), score, random_box(&mut rng))
            })
            .collect();
        let gts: Vec<(usize, (u32, u32, u32, u32))> =
            (0..n_gt).map(|_| (rng.random_range(0..images), random_box(&mut rng))).collect();
        let lib_dets: Vec<ImageDetection> = dets
            .iter()
            .map(|&(image, score, b)| ImageDetection {
                image,
                det: Detection::new(BBox::new(b.0, b.1, b.2, b.3).unwrap(), score, "person"),
            })
            .collect();
        let lib_gts: Vec<(usize, GroundTruthBox)> = gts
            .iter()
            .map(|&(image, b)| (image, GroundTruthBox::new(BBox::new(b.0, b.1, b.2, b.3).unwrap(), "person")))
            .collect();
        let got = average_precision(&lib_dets, &lib_gts, 0.5).ap;
        worst = worst.max((got - oracle_ap(&dets, &gts, 0.5)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(2, "AP oracle equivalence", worst <= 1e-9 && secs < 10.0, format!("max_abs_diff={worst:e} runtime={secs:.2}s"))
}

fn criterion_hand_ap() -> Outcome {
    let d = |image, x, score| ImageDetection {
        image,
        det: Detection::new(BBox::new(x, 0, 10, 10).unwrap(), score, "person"),
    };
    let g = |image| (image, GroundTruthBox::new(BBox::new(0, 0, 10, 10).unwrap(), "person"));
    let ap = average_precision(&[d(0, 0, 0.9), d(0, 50, 0.8), d(1, 0, 0.7)], &[g(0), g(1)], 0.5).ap;
    report(3, "hand-derived AP", (ap - 0.833333).abs() <= 1e-6, format!("ap={ap:.6}"))
}

// ---------------------------------------------------------------------------
// 4. selective blur

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32, c: u8) -> ImageBuffer {
    let n = (w * h * c as u32) as usize;
    ImageBuffer::new(w, h, c, (0..n).map(|_| rng.random()).collect()).unwrap()
}

/// Dense truncated Gaussian with float weights, no delta rule.
fn dense_gaussian(img: &ImageBuffer, radius: i64) -> Vec<f64> {
    let sigma = radius as f64 / 2.0;
    let (w, h, c) = (img.width() as i64, img.height() as i64, img.channels());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (mut num, mut den) = (0.0, 0.0);
                for qy in (y - radius).max(0)..=(y + radius).min(h - 1) {
                    for qx in (x - radius).max(0)..=(x + radius).min(w - 1) {
                        let d2 = ((qx - x).pow(2) + (qy - y).pow(2)) as f64;
                        let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                        num += wt * img.get(qx as u32, qy as u32, ch) as f64;
                        den += wt;
                    }
                }
                out.push(num / den);
            }
        }
    }
    out
}

fn criterion_blur() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut identity_ok = true;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let img = random_image(&mut rng, 32, 32, if i % 2 == 0 { 1 } else { 3 });
        identity_ok &= selective_gaussian_blur(&img, &BlurParams::new(5, 0).unwrap()) == img;
        let got = selective_gaussian_blur(&img, &BlurParams::new(5, 255).unwrap());
        let want = dense_gaussian(&img, 5);
        for (g, w) in got.pixels().iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
    }
    let mut px = vec![0u8; 9];
    px[4] = 255;
    let spot = ImageBuffer::new(3, 3, 1, px).unwrap();
    let spot_out = selective_gaussian_blur(&spot, &BlurParams::new(1, 50).unwrap());
    let centre_ok = spot_out.get(1, 1, 0) == 255 && spot_out.get(0, 0, 0) == 0;
    let d = BlurParams::default();
    let defaults_ok = d.radius() == 5 && d.max_delta() == 50;
    report(
        4,
        "selective blur",
        identity_ok && worst <= 1.0 && centre_ok && defaults_ok,
        format!("identity={identity_ok} max_dense_diff={worst:.3} centre_case={centre_ok} defaults={defaults_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 5. determinism

fn criterion_determinism() -> Outcome {
    let cfg = SynthConfig { width: 900, height: 700, targets_per_scene: (3, 12), blur: None, ..SynthConfig::default() };
    let assets = SceneAssets::load(&cfg).unwrap();
    let mut frames_ok = 0;
    for i in 0..20 {
        let img = compose_scene(&cfg, &assets, &mut scene_rng(55, i)).image;
        let runs: Vec<Vec<Detection>> = [1, 2, 8]
            .iter()
            .map(|&workers| run_frame(&img, &PipelineConfig { workers, ..PipelineConfig::default() }).unwrap().detections)
            .collect();
        if runs[0] == runs[1] && runs[0] == runs[2] {
            frames_ok += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut idempotent = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..30);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let b = BBox::new(rng.random_range(0..60), rng.random_range(0..60), rng.random_range(1..25), rng.random_range(1..25)).unwrap();
                let class = if rng.random_bool(0.2) { "boat" } else { "person" };
                Detection::new(b, rng.random_range(0..=10) as f64 / 10.0, class)
            })
            .collect();
        let once = nms_merge(&dets, 0.5);
        if nms_merge(&once, 0.5) == once {
            idempotent += 1;
        }
    }
    report(
        5,
        "pipeline determinism",
        frames_ok == 20 && idempotent == 1000,
        format!("frames_identical={frames_ok}/20 nms_idempotent={idempotent}/1000"),
    )
}

// ---------------------------------------------------------------------------
// 6. synthetic end to end

fn criterion_end_to_end(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig { scenes: 50, seed: 2024, width: 1920, height: 1080, ..SynthConfig::default() };
    let out = generate_dataset(&cfg, &dir.join("e2e")).unwrap();
    let sides_ok = out
        .manifest
        .entries
        .iter()
        .flat_map(|e| &e.boxes)
        .all(|b| (5..=50).contains(&b.bbox.w()) && (5..=50).contains(&b.bbox.h()));
    let run = run_dataset(&out.manifest, &dir.join("e2e"), &PipelineConfig::default(), &dir.join("e2e/detections.json"), false).unwrap();
    let r = evaluate(&run.document, &out.manifest, 0.5, PipelineConfig::default().conf_thresh).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "synthetic end-to-end detection",
        r.recall >= 0.90 && r.precision >= 0.80 && sides_ok && secs < 300.0,
        format!(
            "recall={:.4} precision={:.4} map={:.4} gt={} sides_in_band={sides_ok} runtime={secs:.1}s",
            r.recall,
            r.precision,
            r.map,
            r.counts.tp + r.counts.fn_
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. latency

fn criterion_latency() -> Outcome {
    let img = bench_frame(0);
    let report_ = bench(&img, &PipelineConfig::default(), 3, &[1, 4]).unwrap();
    let four = report_.rows.iter().find(|r| r.workers == 4).unwrap().total.median_ms;
    let one = report_.rows.iter().find(|r| r.workers == 1).unwrap().total.median_ms;
    let speedup = one / four;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let budget_ok = four < 8000.0;
    let speed_ok = speedup >= 1.8;
    let mut out = report(
        7,
        "latency budget",
        budget_ok && speed_ok,
        format!(
            "frame={}x{} tiles={} one_worker={one:.0}ms four_workers={four:.0}ms speedup={speedup:.2} (need >=1.8) logical_cpus={cpus}",
            report_.width, report_.height, report_.tile_count
        ),
    );
    // the speedup half presumes at least four hardware threads
    out.hardware_bound = budget_ok && !speed_ok && cpus < 4;
    out
}

// ---------------------------------------------------------------------------
// 8. reproducibility

fn checksum_dir(dir: &Path) -> (u64, usize) {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
    names.sort();
    let mut h = DefaultHasher::new();
    for p in &names {
        p.file_name().hash(&mut h);
        fs::read(p).unwrap().hash(&mut h);
    }
    (h.finish(), names.len())
}

fn criterion_reproducibility(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sartile");
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).current_dir(dir).env("NO_COLOR", "1").output().unwrap();
        assert!(st.status.success(), "{args:?}: {}", String::from_utf8_lossy(&st.stderr));
    };
    let mut sums = Vec::new();
    for k in ["a", "b"] {
        let synth = format!("synth_{k}");
        let det = format!("det_{k}");
        run(&["synth", "--scenes", "3", "--seed", "11", "--out", &synth]);
        run(&["detect", "--manifest", &format!("{synth}/manifest.json"), "--out", &det]);
        sums.push((checksum_dir(&dir.join(&synth)), checksum_dir(&dir.join(&det))));
    }
    let same = sums[0] == sums[1];
    report(
        8,
        "reproducibility",
        same && (sums[0].0).1 == 4,
        format!("synth={:016x}/{:016x} detect={:016x}/{:016x}", (sums[0].0).0, (sums[1].0).0, (sums[0].1).0, (sums[1].1).0),
    )
}

// ---------------------------------------------------------------------------
// 9. augmentation

fn mask_bbox(img: &ImageBuffer) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y, 0) != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != u32::MAX).then(|| BBox::from_corners(x0, y0, x1, y1).unwrap())
}

fn random_annotated(rng: &mut ChaCha8Rng) -> (ImageBuffer, Vec<GroundTruthBox>) {
    let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
    let channels = if rng.random_bool(0.5) { 3 } else { 1 };
    let img = random_image(rng, w, h, channels);
    let boxes = (0..rng.random_range(0..6))
        .map(|_| {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let b = BBox::new(x, y, rng.random_range(1..=w - x), rng.random_range(1..=h - y)).unwrap();
            GroundTruthBox::new(b, "person")
        })
        .collect();
    (img, boxes)
}

fn criterion_augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identities = 0;
    for _ in 0..50 {
        let (img, boxes) = random_annotated(&mut rng);
        let id = (img.clone(), boxes.clone());
        let (a, b) = hflip(&img, &boxes);
        let hh = hflip(&a, &b) == id;
        let (a, b) = vflip(&img, &boxes);
        let vv = vflip(&a, &b) == id;
        let mut r = (img.clone(), boxes.clone());
        for _ in 0..4 {
            r = rot90(&r.0, &r.1);
        }
        if hh && vv && r == id {
            identities += 1;
        }
    }
    let mut formula_ok = 0;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=80u32), rng.random_range(1..=80u32));
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..=w - x), rng.random_range(1..=h - y));
        let mask = ImageBuffer::from_fn_gray(w, h, |px, py| (px >= x && px < x + bw && py >= y && py < y + bh) as u8).unwrap();
        let gt = GroundTruthBox::new(BBox::new(x, y, bw, bh).unwrap(), "person");
        let (flipped, boxes) = hflip(&mask, &[gt]);
        let expected = BBox::new(w - x - bw, y, bw, bh).unwrap();
        if boxes[0].bbox == expected && mask_bbox(&flipped) == Some(expected) {
            formula_ok += 1;
        }
    }
    report(
        9,
        "augmentation exactness",
        identities == 50 && formula_ok == 100,
        format!("identities={identities}/50 hflip_formula={formula_ok}/100"),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let outcomes = [
        criterion_tiling(),
        criterion_ap_oracle(),
        criterion_hand_ap(),
        criterion_blur(),
        criterion_determinism(),
        criterion_end_to_end(dir.path()),
        criterion_latency(),
        criterion_reproducibility(dir.path()),
        criterion_augmentation(),
    ];
    let strict = std::env::var_os("SARTILE_STRICT_ACCEPTANCE").is_some_and(|v| v == "1");
    let failed: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| !o.pass).map(|(i, _)| i + 1).collect();
    let blocking: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.pass && (strict || !o.hardware_bound))
        .map(|(i, _)| i + 1)
        .collect();
    emit(format!("acceptance: {}/9 criteria passed; failed={failed:?}", 9 - failed.len()));
    if blocking.len() < failed.len() {
        emit("acceptance: criterion 7 speedup needs >=4 logical CPUs; set SARTILE_STRICT_ACCEPTANCE=1 to make it blocking".into());
    }
    assert!(blocking.is_empty(), "failed criteria: {blocking:?}");
}
