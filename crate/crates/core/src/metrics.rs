//! Detection quality: greedy matching, precision/recall, AP and mAP at a
//! single IoU threshold.
//!
//! Matching uses plain IoU. GIoU is only reported, as the mean over matched
//! pairs, to describe how tight the true positives are.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{Annotation, ImageAnnotations};
use crate::geometry::{giou, iou, BBox, Category, Detection};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {message}")]
    Validation { line: u64, message: String },
    #[error("detections reference images missing from the ground truth: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("categories outside the taxonomy: {}", .0.join(", "))]
    UnknownCategories(Vec<String>),
    #[error("IoU threshold {0} must lie in (0, 1]")]
    Threshold(f64),
}

impl MetricsError {
    pub fn line(&self) -> Option<u64> {
        match self {
            Self::Parse { line, .. } | Self::Validation { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Outcome for one detection, in matching order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatch {
    /// Position in the input slice.
    pub index: usize,
    pub category: Category,
    pub confidence: f64,
    /// Index of the matched ground truth; `None` means false positive.
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub detections: Vec<DetectionMatch>,
    /// For each ground truth, the input index of the detection that claimed it.
    pub ground_truth: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.is_tp()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.ground_truth.iter().filter(|g| g.is_none()).count()
    }
}

/// Order in which detections claim ground truth: confidence descending, then
/// box coordinates and category, then input position.
///
/// Ordering equal-confidence detections by content rather than by position
/// keeps results independent of how detections are listed.
pub fn matching_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence()
            .total_cmp(&dets[i].confidence())
            .then_with(|| dets[i].bbox.canonical_cmp(&dets[j].bbox))
            .then_with(|| dets[i].category.cmp(&dets[j].category))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy one-to-one matching within an image.
///
/// Each detection, in [`matching_order`], takes the still-unmatched ground
/// truth of its category with the highest IoU at or above the threshold
/// (lowest index on ties); otherwise it is a false positive.
pub fn match_detections(gt: &[Annotation], dets: &[Detection], iou_threshold: f64) -> MatchResult {
    let mut claimed: Vec<Option<usize>> = vec![None; gt.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for i in matching_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, ann) in gt.iter().enumerate() {
            if claimed[g].is_some() || ann.category != d.category {
                continue;
            }
            let overlap = iou(&ann.bbox, &d.bbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = Some(i);
        }
        outcomes.push(DetectionMatch {
            index: i,
            category: d.category.clone(),
            confidence: d.confidence(),
            matched_gt: best.map(|(g, _)| g),
            iou: best.map(|(_, o)| o).unwrap_or(0.0),
        });
    }
    MatchResult {
        iou_threshold,
        detections: outcomes,
        ground_truth: claimed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall after each detection, pooled over images.
///
/// `scored` holds `(confidence, is_true_positive)` for one category; points
/// come out in descending-confidence order. Detections sharing a confidence
/// form one operating point, so each of them reports the cumulative counts
/// at the end of its tie group.
pub fn pr_curve(scored: &[(f64, bool)], num_gt: usize) -> Vec<PrPoint> {
    assert!(num_gt > 0, "PR curve needs at least one ground truth");
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end < sorted.len() && sorted[end].0 == sorted[start].0 {
            if sorted[end].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        let point = PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        };
        points.extend(std::iter::repeat_n(point, end - start));
        start = end;
    }
    points
}

/// All-points interpolated AP: the sum over recall steps of the step width
/// times the best precision reachable at that recall or beyond.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (slot, p) in envelope.iter_mut().zip(points).rev() {
        running = running.max(p.precision);
        *slot = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// A detection attributed to an image, as read from a detections file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_name: String,
    pub detection: Detection,
}

const DETECTION_COLUMNS: usize = 7;

/// Parse `image_name,x1,y1,x2,y2,category,confidence` rows, optional header.
pub fn parse_detections_csv(bytes: &[u8]) -> Result<Vec<DetectionRecord>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    let mut first = true;
    for result in reader.records() {
        let record = result.map_err(|e| MetricsError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.len() > 1 && record[1].trim().parse::<f64>().is_err() {
                continue;
            }
        }
        let parse_err = |message: String| MetricsError::Parse { line, message };
        let invalid = |message: String| MetricsError::Validation { line, message };
        if record.len() != DETECTION_COLUMNS {
            return Err(parse_err(format!(
                "expected {DETECTION_COLUMNS} columns, found {}",
                record.len()
            )));
        }
        let num = |i: usize, name: &str| -> Result<f64, MetricsError> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(format!("{name} `{}` is not a number", &record[i])))
        };
        let image_name = record[0].trim().to_string();
        if image_name.is_empty() {
            return Err(invalid("empty image_name".into()));
        }
        let bbox = BBox::new(num(1, "x1")?, num(2, "y1")?, num(3, "x2")?, num(4, "y2")?)
            .map_err(|e| invalid(e.to_string()))?;
        let category = Category::new(record[5].trim()).map_err(|e| invalid(e.to_string()))?;
        let detection =
            Detection::new(bbox, category, num(6, "confidence")?).map_err(|e| invalid(e.to_string()))?;
        out.push(DetectionRecord {
            image_name,
            detection,
        });
    }
    Ok(out)
}

pub fn write_detections_csv(records: &[DetectionRecord]) -> String {
    let mut out = String::from("image_name,x1,y1,x2,y2,category,confidence\n");
    for r in records {
        let b = &r.detection.bbox;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.image_name,
            b.x1(),
            b.y1(),
            b.x2(),
            b.y2(),
            r.detection.category,
            r.detection.confidence()
        ));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Evaluation summary. Serialized field names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    /// Unweighted mean AP over categories with at least one ground truth.
    pub map: f64,
    pub per_category_ap: BTreeMap<String, f64>,
    /// Matched ground truth over all ground truth, every detection counted.
    pub recall: f64,
    /// Mean GIoU of matched pairs; `None` without true positives.
    pub mean_giou_true_positives: Option<f64>,
    pub counts: EvalCounts,
    pub categories_without_ground_truth: Vec<String>,
}

/// Evaluate detections against ground truth at one IoU threshold.
///
/// Every category in either input must belong to `taxonomy`; taxonomy
/// categories without ground truth are listed but left out of the mAP.
pub fn evaluate(
    gt: &[ImageAnnotations],
    dets: &[DetectionRecord],
    iou_threshold: f64,
    taxonomy: &[Category],
) -> Result<EvalReport, MetricsError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(MetricsError::Threshold(iou_threshold));
    }
    let known: BTreeSet<&Category> = taxonomy.iter().collect();
    let unknown: BTreeSet<String> = gt
        .iter()
        .flat_map(|img| img.annotations.iter().map(|a| &a.category))
        .chain(dets.iter().map(|d| &d.detection.category))
        .filter(|c| !known.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(MetricsError::UnknownCategories(unknown.into_iter().collect()));
    }

    let image_slots: HashMap<&str, usize> =
        gt.iter().enumerate().map(|(i, img)| (img.image_name.as_str(), i)).collect();
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); gt.len()];
    let mut missing = BTreeSet::new();
    for rec in dets {
        match image_slots.get(rec.image_name.as_str()) {
            Some(&slot) => per_image[slot].push(rec.detection.clone()),
            None => {
                missing.insert(rec.image_name.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(MetricsError::UnknownImages(missing.into_iter().collect()));
    }

    let mut scored: BTreeMap<&Category, Vec<(f64, bool)>> = BTreeMap::new();
    let mut gt_per_category: BTreeMap<&Category, usize> = BTreeMap::new();
    let mut counts = EvalCounts {
        images: gt.len(),
        detections: dets.len(),
        ..Default::default()
    };
    let mut giou_sum = 0.0;

    for (img, img_dets) in gt.iter().zip(&per_image) {
        for a in &img.annotations {
            *gt_per_category.entry(&a.category).or_default() += 1;
        }
        let result = match_detections(&img.annotations, img_dets, iou_threshold);
        for m in &result.detections {
            let category = &img_dets[m.index].category;
            scored.entry(category).or_default().push((m.confidence, m.is_tp()));
            if let Some(g) = m.matched_gt {
                giou_sum += giou(&img.annotations[g].bbox, &img_dets[m.index].bbox);
            }
        }
        counts.ground_truth += img.annotations.len();
        counts.true_positives += result.true_positives();
        counts.false_positives += result.false_positives();
        counts.false_negatives += result.false_negatives();
    }

    let mut per_category_ap = BTreeMap::new();
    let mut categories_without_ground_truth = Vec::new();
    for category in &known {
        match gt_per_category.get(category) {
            Some(&n) if n > 0 => {
                let points = pr_curve(scored.get(category).map(Vec::as_slice).unwrap_or(&[]), n);
                per_category_ap.insert(category.to_string(), average_precision(&points));
            }
            _ => categories_without_ground_truth.push(category.to_string()),
        }
    }

    let map = if per_category_ap.is_empty() {
        0.0
    } else {
        per_category_ap.values().sum::<f64>() / per_category_ap.len() as f64
    };
    let recall = if counts.ground_truth == 0 {
        0.0
    } else {
        counts.true_positives as f64 / counts.ground_truth as f64
    };
    let mean_giou_true_positives =
        (counts.true_positives > 0).then(|| giou_sum / counts.true_positives as f64);

    Ok(EvalReport {
        iou_threshold,
        map,
        per_category_ap,
        recall,
        mean_giou_true_positives,
        counts,
        categories_without_ground_truth,
    })
}
