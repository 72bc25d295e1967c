//! Detection scoring: IoU matching, precision/recall, all-points
//! interpolated average precision and mAP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::format::fixed6;
use crate::model::{iou, rank_order, DatasetManifest, Detection, GroundTruthBox};
use crate::pipeline::DetectionsDocument;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detections reference images missing from the manifest: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("image {0} appears more than once in the detections document")]
    DuplicateImage(String),
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `(precision, recall)`, each 1.0 when its denominator is zero.
    pub fn precision_recall(&self) -> (f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        (ratio(self.tp, self.tp + self.fp), ratio(self.tp, self.tp + self.fn_))
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub counts: Counts,
    /// `(detection index, ground-truth index, iou)` for every true positive.
    pub matched_pairs: Vec<(usize, usize, f64)>,
    /// `true` marks a true positive, indexed like the input detections.
    pub is_tp: Vec<bool>,
}

/// Greedy matching for one image and one class. Detections are visited in
/// rank order; each claims the unclaimed ground truth with the highest IoU
/// (lowest index on ties) when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    let mut matched_pairs = Vec::new();
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= iou_thresh && v > 0.0 {
                claimed[gi] = true;
                is_tp[di] = true;
                matched_pairs.push((di, gi, v));
            }
        }
    }
    let tp = matched_pairs.len();
    MatchResult {
        counts: Counts {
            tp,
            fp: dets.len() - tp,
            fn_: gts.len() - tp,
        },
        matched_pairs,
        is_tp,
    }
}

pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    m.counts.precision_recall()
}

/// A detection tagged with the image it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub det: Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// `(recall, precision)` after each detection in rank order.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Average precision for one class over a dataset. Matching is per image;
/// the sweep runs over all detections ordered by score descending, then
/// image, then box. AP is the area under the precision envelope,
/// `Σ (r_i − r_{i−1}) · max_{j ≥ i} p_j`.
pub fn average_precision(
    dets: &[ImageDetection],
    gts: &[(usize, GroundTruthBox)],
    iou_thresh: f64,
) -> ApResult {
    let mut per_image_dets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        per_image_dets.entry(d.image).or_default().push(i);
    }
    let mut per_image_gts: HashMap<usize, Vec<GroundTruthBox>> = HashMap::new();
    for (image, gt) in gts {
        per_image_gts.entry(*image).or_default().push(gt.clone());
    }

    let mut is_tp = vec![false; dets.len()];
    for (image, idx) in &per_image_dets {
        let image_dets: Vec<Detection> = idx.iter().map(|&i| dets[i].det.clone()).collect();
        let image_gts = per_image_gts.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_detections(&image_dets, image_gts, iou_thresh);
        for (local, &global) in idx.iter().enumerate() {
            is_tp[global] = m.is_tp[local];
        }
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .det
            .score
            .total_cmp(&dets[a].det.score)
            .then(dets[a].image.cmp(&dets[b].image))
            .then(dets[a].det.bbox.cmp(&dets[b].det.bbox))
            .then(a.cmp(&b))
    });

    let total_gt = gts.len();
    let mut pr_curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if is_tp[i] {
            tp += 1;
        }
        let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
        pr_curve.push((recall, tp as f64 / (rank + 1) as f64));
    }
    if total_gt == 0 {
        return ApResult { ap: 0.0, pr_curve };
    }

    // precision envelope, right to left
    let mut envelope: Vec<f64> = pr_curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in pr_curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    ApResult { ap, pr_curve }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    #[serde(serialize_with = "fixed6")]
    pub recall: f64,
    #[serde(serialize_with = "fixed6")]
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: String,
    /// Area under the precision envelope over all detections.
    #[serde(serialize_with = "fixed6")]
    pub ap: f64,
    /// Precision of detections scoring at least the confidence threshold.
    #[serde(serialize_with = "fixed6")]
    pub precision: f64,
    #[serde(serialize_with = "fixed6")]
    pub recall: f64,
    pub ground_truths: usize,
    pub detections: usize,
    pub counts: Counts,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "fixed6")]
    pub map: f64,
    #[serde(serialize_with = "fixed6")]
    pub precision: f64,
    #[serde(serialize_with = "fixed6")]
    pub recall: f64,
    #[serde(serialize_with = "fixed6")]
    pub iou_thresh: f64,
    #[serde(serialize_with = "fixed6")]
    pub conf_thresh: f64,
    pub images: usize,
    pub counts: Counts,
    /// Classes present in the ground truth, sorted by name.
    pub classes: Vec<ClassReport>,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == name)
    }

    pub fn summary_line(&self) -> String {
        format!(
            "mAP={:.6} P={:.6} R={:.6}",
            self.map, self.precision, self.recall
        )
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("report values are finite");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_json_bytes()).map_err(|source| EvalError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `recall,precision` CSV with six fractional digits.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("recall,precision\n");
    for p in curve {
        out.push_str(&format!("{:.6},{:.6}\n", p.recall, p.precision));
    }
    out
}

/// Scores a detections document against a manifest. Manifest images absent
/// from the document count as having no detections.
pub fn evaluate(
    doc: &DetectionsDocument,
    manifest: &DatasetManifest,
    iou_thresh: f64,
    conf_thresh: f64,
) -> Result<EvalReport, EvalError> {
    let index: HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.path.as_str(), i))
        .collect();
    let mut unknown: Vec<String> = doc
        .results
        .iter()
        .filter(|r| !index.contains_key(r.path.as_str()))
        .map(|r| r.path.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(EvalError::UnknownImages(unknown));
    }
    let mut seen = BTreeSet::new();
    for r in &doc.results {
        if !seen.insert(r.path.as_str()) {
            return Err(EvalError::DuplicateImage(r.path.clone()));
        }
    }

    let mut dets_by_image: Vec<&[Detection]> = vec![&[]; manifest.entries.len()];
    for r in &doc.results {
        dets_by_image[index[r.path.as_str()]] = &r.detections;
    }

    let gt_classes: BTreeSet<&str> = manifest
        .entries
        .iter()
        .flat_map(|e| e.boxes.iter().map(|b| b.class_label.as_str()))
        .collect();

    let mut classes = Vec::with_capacity(gt_classes.len());
    let mut total = Counts::default();
    for class in &gt_classes {
        let mut all_dets = Vec::new();
        let mut all_gts = Vec::new();
        let mut counts = Counts::default();
        for (image, entry) in manifest.entries.iter().enumerate() {
            let gts: Vec<GroundTruthBox> = entry
                .boxes
                .iter()
                .filter(|b| b.class_label == *class)
                .cloned()
                .collect();
            let dets: Vec<Detection> = dets_by_image[image]
                .iter()
                .filter(|d| d.class_label == *class)
                .cloned()
                .collect();
            let confident: Vec<Detection> =
                dets.iter().filter(|d| d.score >= conf_thresh).cloned().collect();
            counts += match_detections(&confident, &gts, iou_thresh).counts;
            all_dets.extend(dets.into_iter().map(|det| ImageDetection { image, det }));
            all_gts.extend(gts.into_iter().map(|g| (image, g)));
        }
        let ap = average_precision(&all_dets, &all_gts, iou_thresh);
        let (precision, recall) = counts.precision_recall();
        total += counts;
        classes.push(ClassReport {
            class: class.to_string(),
            ap: ap.ap,
            precision,
            recall,
            ground_truths: all_gts.len(),
            detections: all_dets.len(),
            counts,
            pr_curve: ap
                .pr_curve
                .into_iter()
                .map(|(recall, precision)| PrPoint { recall, precision })
                .collect(),
        });
    }
    // confident detections of classes absent from the ground truth
    total.fp += dets_by_image
        .iter()
        .flat_map(|d| d.iter())
        .filter(|d| d.score >= conf_thresh && !gt_classes.contains(d.class_label.as_str()))
        .count();

    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    };
    let (precision, recall) = total.precision_recall();
    Ok(EvalReport {
        map,
        precision,
        recall,
        iou_thresh,
        conf_thresh,
        images: manifest.entries.len(),
        counts: total,
        classes,
    })
}
