//! Record types flowing between pipeline stages, the JSONL manifest format,
//! and the digests used to resume interrupted runs.

mod digest;
mod manifest;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use crate::geometry::BBox;

pub use digest::{canonical_json, fnv1a64, to_canonical, Digest128};
pub use manifest::{is_complete, read_manifest, read_manifest_lenient, write_manifest, ManifestError, TERMINATOR_KEY};

/// 64-bit perceptual hash, serialized as 16 lowercase hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PHash(pub u64);

impl fmt::Display for PHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for PHash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(format!("phash must be 16 lowercase hex chars, got {s:?}"));
        }
        u64::from_str_radix(s, 16).map(PHash).map_err(|e| e.to_string())
    }
}

impl Serialize for PHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Flat detector input built from the two summarization passes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategorySet {
    pub phrases: Vec<String>,
    pub terms: Vec<String>,
    pub merged: Vec<String>,
}

/// A single detection in absolute pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
    pub detector: String,
}

impl DetBox {
    pub fn new(bbox: BBox, category: impl Into<String>, score: f64, detector: impl Into<String>) -> Self {
        DetBox { bbox, category: category.into(), score, detector: detector.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    Candidate,
    Resampled,
    Verified,
    Rejected,
    Indeterminate,
}

impl InstanceStatus {
    pub fn can_transition_to(self, next: InstanceStatus) -> bool {
        use InstanceStatus::*;
        matches!(
            (self, next),
            (Candidate, Resampled) | (Resampled, Verified) | (Resampled, Rejected) | (Resampled, Indeterminate)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceStatus::Candidate => "candidate",
            InstanceStatus::Resampled => "resampled",
            InstanceStatus::Verified => "verified",
            InstanceStatus::Rejected => "rejected",
            InstanceStatus::Indeterminate => "indeterminate",
        }
    }
}

/// An annotation candidate and everything later stages learned about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(flatten)]
    pub det: DetBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_yes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_no: Option<f64>,
    pub status: InstanceStatus,
}

impl Instance {
    pub fn candidate(det: DetBox) -> Self {
        Instance { det, layer: None, p_yes: None, p_no: None, status: InstanceStatus::Candidate }
    }

    pub fn transition(&mut self, next: InstanceStatus) -> Result<(), String> {
        if !self.status.can_transition_to(next) {
            return Err(format!("illegal status transition {} -> {}", self.status.as_str(), next.as_str()));
        }
        self.status = next;
        Ok(())
    }
}

/// Why a record stopped progressing through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub reason: String,
}

/// One source image and all fields derived for it so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aesthetic: Option<f64>,
    #[serde(default)]
    pub web_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<PHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<CategorySet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<Instance>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<Failure>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, uri: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            id: id.into(),
            uri: uri.into(),
            width,
            height,
            aesthetic: None,
            web_caption: String::new(),
            phash: None,
            description: None,
            categories: None,
            instances: None,
            failed: None,
        }
    }

    /// Checks the per-record invariants; the message names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.width < 1 || self.height < 1 {
            return Err(format!("dimensions must be >= 1, got {}x{}", self.width, self.height));
        }
        if let Some(a) = self.aesthetic {
            if !a.is_finite() {
                return Err("aesthetic score is not finite".into());
            }
        }
        if let Some(cats) = &self.categories {
            let mut seen = HashSet::new();
            for c in &cats.merged {
                if c.is_empty() {
                    return Err("empty category in merged list".into());
                }
                if c.to_lowercase() != *c {
                    return Err(format!("category {c:?} is not lowercase"));
                }
                if !seen.insert(c.as_str()) {
                    return Err(format!("duplicate category {c:?} in merged list"));
                }
            }
        }
        if let Some(instances) = &self.instances {
            let merged: Option<HashSet<&str>> =
                self.categories.as_ref().map(|c| c.merged.iter().map(String::as_str).collect());
            for (i, inst) in instances.iter().enumerate() {
                let b = &inst.det.bbox;
                if !b.is_valid() {
                    return Err(format!("instance {i}: invalid box {:?}", b.to_array()));
                }
                if !b.within(f64::from(self.width), f64::from(self.height)) {
                    return Err(format!(
                        "instance {i}: box {:?} outside {}x{} image",
                        b.to_array(),
                        self.width,
                        self.height
                    ));
                }
                if !(0.0..=1.0).contains(&inst.det.score) {
                    return Err(format!("instance {i}: score {} outside [0,1]", inst.det.score));
                }
                if let Some(merged) = &merged {
                    if !merged.contains(inst.det.category.as_str()) {
                        return Err(format!("instance {i}: category {:?} not in merged list", inst.det.category));
                    }
                }
                for p in [inst.p_yes, inst.p_no].into_iter().flatten() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(format!("instance {i}: probability {p} outside [0,1]"));
                    }
                }
                if let (Some(y), Some(n)) = (inst.p_yes, inst.p_no) {
                    if y + n > 1.0 + 1e-9 {
                        return Err(format!("instance {i}: p_yes + p_no = {} > 1", y + n));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Curate,
    Describe,
    Summarize,
    Detect,
    Resample,
    Crosscheck,
    Finalize,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Curate,
        Stage::Describe,
        Stage::Summarize,
        Stage::Detect,
        Stage::Resample,
        Stage::Crosscheck,
        Stage::Finalize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::Describe => "describe",
            Stage::Summarize => "summarize",
            Stage::Detect => "detect",
            Stage::Resample => "resample",
            Stage::Crosscheck => "crosscheck",
            Stage::Finalize => "finalize",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("stage listed in ALL")
    }

    pub fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }

    /// The subset of record fields this stage reads.
    pub fn consumed_fields(self, r: &ImageRecord) -> Value {
        match self {
            Stage::Curate => json!({
                "id": r.id, "uri": r.uri, "width": r.width, "height": r.height, "aesthetic": r.aesthetic,
            }),
            Stage::Describe => json!({ "id": r.id, "uri": r.uri }),
            Stage::Summarize => json!({ "description": r.description, "web_caption": r.web_caption }),
            Stage::Detect => json!({
                "id": r.id, "uri": r.uri, "width": r.width, "height": r.height, "categories": r.categories,
            }),
            Stage::Resample => json!({
                "id": r.id, "width": r.width, "height": r.height, "instances": r.instances,
            }),
            Stage::Crosscheck => json!({
                "id": r.id, "uri": r.uri, "width": r.width, "height": r.height, "instances": r.instances,
            }),
            Stage::Finalize => serde_json::to_value(r).unwrap_or(Value::Null),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Resumability key: a pure function of the fields `stage` consumes and the
/// stage's configuration subtree.
pub fn record_digest(record: &ImageRecord, stage: Stage, stage_config: &Value) -> Digest128 {
    Digest128::of_value(&json!({
        "stage": stage.as_str(),
        "fields": stage.consumed_fields(record),
        "config": stage_config,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageRecord {
        let mut r = ImageRecord::new("img-1", "file:///a.png", 100, 80);
        r.web_caption = "a cat".into();
        r.aesthetic = Some(6.25);
        r
    }

    #[test]
    fn absent_fields_are_omitted() {
        let s = to_canonical(&sample()).unwrap();
        assert_eq!(
            s,
            r#"{"aesthetic":6.25,"height":80,"id":"img-1","uri":"file:///a.png","web_caption":"a cat","width":100}"#
        );
        assert!(!s.contains("null"));
    }

    #[test]
    fn instance_wire_shape() {
        let mut inst = Instance::candidate(DetBox::new(BBox::new(1.0, 2.0, 3.5, 4.0), "cat", 0.5, "gd"));
        inst.layer = Some(0);
        let s = to_canonical(&inst).unwrap();
        assert_eq!(
            s,
            r#"{"box":[1.0,2.0,3.5,4.0],"category":"cat","detector":"gd","layer":0,"score":0.5,"status":"candidate"}"#
        );
        let back: Instance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn phash_hex_format() {
        let mut r = sample();
        r.phash = Some(PHash(0xab));
        let s = to_canonical(&r).unwrap();
        assert!(s.contains(r#""phash":"00000000000000ab""#));
        assert!("00000000000000AB".parse::<PHash>().is_err());
    }

    #[test]
    fn status_transitions() {
        let mut inst = Instance::candidate(DetBox::new(BBox::new(0.0, 0.0, 1.0, 1.0), "x", 0.5, "d"));
        assert!(inst.transition(InstanceStatus::Verified).is_err());
        inst.transition(InstanceStatus::Resampled).unwrap();
        inst.transition(InstanceStatus::Rejected).unwrap();
        assert!(inst.transition(InstanceStatus::Verified).is_err());
    }

    #[test]
    fn digest_is_deterministic() {
        let cfg = json!({"nms_threshold": 0.4});
        assert_eq!(record_digest(&sample(), Stage::Summarize, &cfg), record_digest(&sample(), Stage::Summarize, &cfg));
    }

    #[test]
    fn digest_tracks_consumed_fields() {
        let cfg = json!({});
        let a = sample();
        let mut b = sample();
        b.web_caption = "a dog".into();
        assert_ne!(record_digest(&a, Stage::Summarize, &cfg), record_digest(&b, Stage::Summarize, &cfg));
        // describe never sees the web caption
        assert_eq!(record_digest(&a, Stage::Describe, &cfg), record_digest(&b, Stage::Describe, &cfg));
    }

    #[test]
    fn digest_tracks_config() {
        let r = sample();
        assert_ne!(
            record_digest(&r, Stage::Detect, &json!({"nms_threshold": 0.4})),
            record_digest(&r, Stage::Detect, &json!({"nms_threshold": 0.5}))
        );
    }

    #[test]
    fn validate_catches_bad_boxes() {
        let mut r = sample();
        r.instances = Some(vec![Instance::candidate(DetBox::new(BBox::new(5.0, 0.0, 2.0, 4.0), "x", 0.5, "d"))]);
        assert!(r.validate().unwrap_err().contains("invalid box"));
        r.instances = Some(vec![Instance::candidate(DetBox::new(BBox::new(0.0, 0.0, 200.0, 4.0), "x", 0.5, "d"))]);
        assert!(r.validate().unwrap_err().contains("outside"));
    }

    #[test]
    fn stage_order() {
        assert_eq!(Stage::Curate.previous(), None);
        assert_eq!(Stage::Finalize.previous(), Some(Stage::Crosscheck));
        assert_eq!("detect".parse::<Stage>().unwrap(), Stage::Detect);
    }
}
