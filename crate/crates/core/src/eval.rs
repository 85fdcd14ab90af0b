//! IoU, localization accuracy, average precision and precision@k.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};

/// IoU thresholds reported by the evaluation report.
pub const LOCALIZATION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Fraction of phrases whose predicted box reaches `threshold` IoU with its
/// ground truth.
pub fn localization_accuracy(predictions: &[BBox], gts: &[BBox], threshold: f64) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::InvalidArgument("empty phrase set".into()));
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou(p, g) >= threshold)
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// One entry of a region-level ranked list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedRegion {
    pub image_id: u64,
    pub region_id: u32,
    pub bbox: BBox,
}

/// Positive boxes for one query, grouped by image.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    by_image: HashMap<u64, Vec<BBox>>,
    count: usize,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a positive; an identical `(image_id, box)` pair already present
    /// is ignored. Returns whether it was inserted.
    pub fn insert(&mut self, image_id: u64, bbox: BBox) -> bool {
        let boxes = self.by_image.entry(image_id).or_default();
        if boxes.contains(&bbox) {
            return false;
        }
        boxes.push(bbox);
        self.count += 1;
        true
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn boxes(&self, image_id: u64) -> &[BBox] {
        self.by_image.get(&image_id).map_or(&[], Vec::as_slice)
    }
}

impl FromIterator<(u64, BBox)> for GroundTruth {
    fn from_iter<I: IntoIterator<Item = (u64, BBox)>>(iter: I) -> Self {
        let mut gt = Self::new();
        for (image, b) in iter {
            gt.insert(image, b);
        }
        gt
    }
}

/// Ground truth per query category.
pub type GroundTruthSet = BTreeMap<String, GroundTruth>;

/// Greedy one-to-one matching in rank order. Each ranked region claims the
/// unmatched ground-truth box in its image with the highest IoU, provided
/// that IoU reaches `iou_threshold`.
pub fn match_ranked(ranked: &[RankedRegion], gt: &GroundTruth, iou_threshold: f64) -> Vec<bool> {
    let mut used: HashMap<u64, Vec<bool>> = HashMap::new();
    ranked
        .iter()
        .map(|r| {
            let boxes = gt.boxes(r.image_id);
            if boxes.is_empty() {
                return false;
            }
            let taken = used
                .entry(r.image_id)
                .or_insert_with(|| vec![false; boxes.len()]);
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, b)| (i, iou(&r.bbox, b)))
                .filter(|(_, o)| *o >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Non-interpolated AP from a true-positive pattern:
/// `Σ precision@r over true-positive ranks r / positives`.
pub fn average_precision_from_hits(hits: &[bool], positives: usize) -> Result<f64> {
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
            sum += tp as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

pub fn average_precision(ranked: &[RankedRegion], gt: &GroundTruth, iou_threshold: f64) -> Result<f64> {
    average_precision_from_hits(&match_ranked(ranked, gt, iou_threshold), gt.len())
}

pub fn precision_at_k(ranked: &[RankedRegion], gt: &GroundTruth, k: usize, iou_threshold: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let hits = match_ranked(ranked, gt, iou_threshold);
    let tp = hits.iter().take(k).filter(|&&h| h).count();
    Ok(tp as f64 / k as f64)
}

/// Unweighted mean of per-query APs; `None` entries (queries without
/// positives) are skipped.
pub fn mean_average_precision(aps: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = aps
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), ap| (s + ap, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: String,
    pub positives: usize,
    pub ap: f64,
    #[serde(rename = "pr@10")]
    pub pr_at_10: f64,
    #[serde(rename = "pr@100")]
    pub pr_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: Vec<QueryReport>,
    pub map: Option<f64>,
    /// Keyed by threshold formatted with one decimal, e.g. `"0.5"`.
    pub localization_accuracy: BTreeMap<String, f64>,
    pub phrases: usize,
    pub iou_threshold: f64,
}
