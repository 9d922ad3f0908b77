//! Detector-ensemble fan-out, box fusion and threshold calibration.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DetBox, ImageRecord};
use crate::gateway::{Gateway, GatewayError};
use crate::geometry::nms_per_category;

pub const DEFAULT_THRESHOLD: f64 = 0.20;
pub const CALIBRATION_FLOOR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("all {count} detectors failed; first error: {first}")]
    AllFailed { count: usize, first: GatewayError },
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("calibration sample is empty")]
    EmptySample,
}

/// One ensemble member. `backend` names the gateway backend serving it and
/// defaults to `id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub id: String,
    #[serde(default)]
    pub backend: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_chunk")]
    pub max_categories_per_call: usize,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_chunk() -> usize {
    80
}

impl DetectorSpec {
    pub fn new(id: impl Into<String>, threshold: f64) -> Self {
        let id = id.into();
        DetectorSpec { backend: id.clone(), id, threshold, max_categories_per_call: default_chunk() }
    }

    pub fn backend_id(&self) -> &str {
        if self.backend.is_empty() {
            &self.id
        } else {
            &self.backend
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub detectors: Vec<DetectorSpec>,
    pub nms_threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            detectors: ["gd", "yw", "ow", "od"].iter().map(|id| DetectorSpec::new(*id, DEFAULT_THRESHOLD)).collect(),
            nms_threshold: 0.4,
        }
    }
}

impl DetectConfig {
    pub fn check(&self) -> Result<(), DetectError> {
        if self.detectors.is_empty() {
            return Err(DetectError::Config("at least one detector is required".into()));
        }
        let mut ids = HashSet::new();
        for d in &self.detectors {
            if !ids.insert(d.id.as_str()) {
                return Err(DetectError::Config(format!("duplicate detector id {:?}", d.id)));
            }
            if !(d.threshold > 0.0 && d.threshold < 1.0) {
                return Err(DetectError::Config(format!("detector {}: threshold must lie in (0,1)", d.id)));
            }
            if d.max_categories_per_call == 0 {
                return Err(DetectError::Config(format!("detector {}: max_categories_per_call must be >= 1", d.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(DetectError::Config("nms_threshold must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectOutcome {
    pub boxes: Vec<DetBox>,
    pub warnings: Vec<String>,
}

/// Queries one detector with `threshold`, keeping boxes at or above it,
/// tagged and clipped to the image.
pub fn detect_one(
    gateway: &Gateway,
    detector: &DetectorSpec,
    image: &[u8],
    width: u32,
    height: u32,
    categories: &[String],
    threshold: f64,
) -> Result<Vec<DetBox>, GatewayError> {
    let (w, h) = (f64::from(width), f64::from(height));
    let mut out = Vec::new();
    for chunk in categories.chunks(detector.max_categories_per_call.max(1)) {
        for d in gateway.detect_request(detector.backend_id(), image, chunk, threshold)? {
            if d.score < threshold {
                continue;
            }
            if let Some(bbox) = d.bbox.clip(w, h) {
                out.push(DetBox::new(bbox, d.category, d.score, detector.id.clone()));
            }
        }
    }
    Ok(out)
}

/// Sends the merged category list to every detector and concatenates the
/// results in roster order. Individual detector failures become warnings;
/// only a total failure fails the record.
pub fn detect_all(
    gateway: &Gateway,
    record: &ImageRecord,
    image: &[u8],
    detectors: &[DetectorSpec],
) -> Result<DetectOutcome, DetectError> {
    let categories = record.categories.as_ref().map(|c| c.merged.as_slice()).unwrap_or_default();
    if categories.is_empty() {
        return Ok(DetectOutcome { boxes: Vec::new(), warnings: vec!["no categories to detect".into()] });
    }
    let results: Vec<Result<Vec<DetBox>, GatewayError>> = std::thread::scope(|s| {
        let handles: Vec<_> = detectors
            .iter()
            .map(|d| {
                s.spawn(move || detect_one(gateway, d, image, record.width, record.height, categories, d.threshold))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("detector worker panicked")).collect()
    });
    let mut outcome = DetectOutcome::default();
    let mut first_err = None;
    let mut failed = 0;
    for (d, r) in detectors.iter().zip(results) {
        match r {
            Ok(boxes) => outcome.boxes.extend(boxes),
            Err(e) => {
                failed += 1;
                outcome.warnings.push(format!("detector {} failed: {e}", d.id));
                first_err.get_or_insert(e);
            }
        }
    }
    if failed == detectors.len() {
        if let Some(first) = first_err {
            return Err(DetectError::AllFailed { count: failed, first });
        }
    }
    Ok(outcome)
}

/// Cross-detector per-category NMS over the concatenated boxes.
pub fn fuse(boxes: &[DetBox], nms_threshold: f64) -> Vec<DetBox> {
    nms_per_category(boxes, nms_threshold)
}

fn mean_at(sorted: &[f64], threshold: f64, images: usize) -> f64 {
    (sorted.len() - sorted.partition_point(|&s| s < threshold)) as f64 / images as f64
}

/// Threshold for one detector whose mean kept boxes per image is closest
/// to `target_mean`. `scores` are all of the detector's raw scores over a
/// sample of `images` images (detected at `floor`). Ties go to the higher
/// threshold.
pub fn calibrate_one(scores: &[f64], images: usize, target_mean: f64, floor: f64) -> f64 {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| *s >= floor).collect();
    sorted.sort_by(f64::total_cmp);
    // Thresholds between two adjacent scores keep the same boxes as the
    // upper score, so the distinct scores are the only candidates worth
    // testing; raising to them also settles ties in favour of the higher one.
    let mut candidates = sorted.clone();
    candidates.dedup();
    if candidates.is_empty() {
        return floor;
    }
    // Means are non-increasing along `candidates`; find the first at or
    // below the target and compare with its predecessor.
    let idx = candidates.partition_point(|&t| mean_at(&sorted, t, images) > target_mean);
    let mut best = candidates[idx.min(candidates.len() - 1)];
    if idx > 0 {
        let lo = candidates[idx - 1];
        let d_lo = (mean_at(&sorted, lo, images) - target_mean).abs();
        let d_best = (mean_at(&sorted, best, images) - target_mean).abs();
        if idx == candidates.len() || d_lo < d_best {
            best = lo;
        }
    }
    best
}

/// Per-detector thresholds balancing average box counts. `sample` holds one
/// entry per image: the raw boxes of every detector at the floor threshold.
pub fn calibrate_thresholds(
    sample: &[Vec<DetBox>],
    detectors: &[DetectorSpec],
    target_mean: f64,
) -> Result<BTreeMap<String, f64>, DetectError> {
    if sample.is_empty() {
        return Err(DetectError::EmptySample);
    }
    Ok(detectors
        .iter()
        .map(|d| {
            let scores: Vec<f64> = sample.iter().flatten().filter(|b| b.detector == d.id).map(|b| b.score).collect();
            (d.id.clone(), calibrate_one(&scores, sample.len(), target_mean, CALIBRATION_FLOOR))
        })
        .collect())
}
