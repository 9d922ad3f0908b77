//! Whole-manifest invariant checks.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::{read_manifest, ImageRecord, InstanceStatus, ManifestError};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidateOptions {
    pub nms_threshold: f64,
    pub layer_iou_max: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { nms_threshold: 0.4, layer_iou_max: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub id: String,
    pub check: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: [{}] {}", self.id, self.check, self.message)
    }
}

pub fn validate_record(r: &ImageRecord, opts: &ValidateOptions) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |check, message: String| out.push(Violation { id: r.id.clone(), check, message });
    if let Err(e) = r.validate() {
        push("record", e);
    }
    let instances = r.instances.as_deref().unwrap_or_default();
    for (k, a) in instances.iter().enumerate() {
        let placed = a.status != InstanceStatus::Candidate;
        if placed != a.layer.is_some() {
            push("status", format!("instance {k}: layer must be set exactly when resampled or later"));
        }
        let judged =
            matches!(a.status, InstanceStatus::Verified | InstanceStatus::Rejected | InstanceStatus::Indeterminate);
        if judged != (a.p_yes.is_some() && a.p_no.is_some()) {
            push("status", format!("instance {k}: yes/no probabilities must be set exactly when cross-checked"));
        }
        for (m, b) in instances.iter().enumerate().skip(k + 1) {
            let overlap = iou(&a.det.bbox, &b.det.bbox);
            if a.det.category == b.det.category && overlap > opts.nms_threshold {
                push("nms", format!("instances {k} and {m} ({}) overlap with IoU {overlap:.4}", a.det.category));
            }
            if let Some(layer) = a.layer.filter(|_| a.layer == b.layer && overlap > opts.layer_iou_max) {
                push("layer", format!("instances {k} and {m} share layer {layer} with IoU {overlap:.4}"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_records(records: &[ImageRecord], opts: &ValidateOptions) -> ValidationReport {
    ValidationReport {
        records: records.len(),
        violations: records.iter().flat_map(|r| validate_record(r, opts)).collect(),
    }
}

/// Fails only if the manifest cannot be read; invariant breaches are
/// reported, not raised.
pub fn validate_manifest(path: &Path, opts: &ValidateOptions) -> Result<ValidationReport, ManifestError> {
    Ok(validate_records(&read_manifest(path)?, opts))
}
